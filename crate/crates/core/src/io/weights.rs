use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PNWT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Serializes a tensor map. Tensors are written in name order.
pub fn encode_weights(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let payload: usize = tensors.values().map(|t| t.numel() * 4 + 32).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("truncated {what}: need {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected PNWT".into(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Unsupported(format!("weights format version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_at = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: name_at + 4,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        if out.contains_key(&name) {
            return Err(Error::Format {
                offset: name_at,
                message: format!("duplicate tensor name {name:?}"),
            });
        }
        let dtype_at = r.pos as u64;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Unsupported(format!(
                "dtype code {dtype} for tensor {name:?} at offset {dtype_at}"
            )));
        }
        let rank_at = r.pos as u64;
        let rank = r.u8("rank")? as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::Format {
                offset: rank_at,
                message: format!("tensor {name:?} has unsupported rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = match numel {
            Some(n) if n > 0 && n <= (bytes.len() - r.pos) / 4 => n,
            Some(n) if n > 0 => {
                return Err(Error::Format {
                    offset: bytes.len() as u64,
                    message: format!("truncated payload for tensor {name:?}: need {} bytes", n * 4),
                })
            }
            _ => {
                return Err(Error::Format {
                    offset: rank_at + 1,
                    message: format!("tensor {name:?} has invalid shape {shape:?}"),
                })
            }
        };
        let payload = r.take(numel * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(name, Tensor::new(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(out)
}

pub fn save_weights(tensors: &BTreeMap<String, Tensor>, path: &Path) -> Result<()> {
    fs::write(path, encode_weights(tensors))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    decode_weights(&fs::read(path)?)
}
