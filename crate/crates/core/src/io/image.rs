use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encodes a `(3, H, W)` tensor as binary PPM. Values are clamped to `[0, 1]`
/// and rounded to 8 bits.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::Input(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let d = image.data();
    for p in 0..h * w {
        for ch in 0..3 {
            out.push(quantize(d[ch * h * w + p]));
        }
    }
    Ok(out)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format {
            offset: start as u64,
            message: "expected a decimal number in PPM header".into(),
        })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Format {
            offset: 0,
            message: "not a binary PPM (P6)".into(),
        });
    }
    let mut pos = 2;
    let w = header_token(bytes, &mut pos)?;
    let h = header_token(bytes, &mut pos)?;
    let maxval = header_token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Unsupported(format!("PPM maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format {
            offset: 2,
            message: format!("empty image {w}x{h}"),
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated raster: need {need} bytes after offset {pos}"),
        });
    }
    let raster = &bytes[pos..pos + need];
    let mut data = vec![0.0f32; need];
    for p in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + p] = raster[3 * p + ch] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    decode_ppm(&bytes)
}

/// `.ppm` files in `dir`, sorted by file name.
pub fn list_ppms(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}
