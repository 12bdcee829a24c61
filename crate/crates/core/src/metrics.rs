//! Image quality metrics and the search objective.

use crate::arch::{ArchCode, Encoder};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta: 0.1,
            gamma: 0.1,
        }
    }
}

impl ObjectiveWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("objective weights must be non-negative, got {all:?}")));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("objective weights must sum to 1, got {all:?}")));
        }
        Ok(())
    }

    pub fn combine(&self, e: f64, p: f64, o: f64) -> f64 {
        self.alpha * e + self.beta * p + self.gamma * o
    }
}

/// Per-candidate evaluation. The quality fields are means over the
/// validation pairs: SSIM between content and result, Gram loss between
/// result and style.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub ssim_whole: f64,
    pub ssim_edge: f64,
    pub gram_loss: f64,
    pub recon_error: f64,
    pub perceptual: f64,
    pub op_fraction: f64,
    pub overall: f64,
}

impl EvalReport {
    /// `|L - (αE + βP + γO)|`.
    pub fn recomposition_error(&self, weights: &ObjectiveWeights) -> f64 {
        (self.overall - weights.combine(self.recon_error, self.perceptual, self.op_fraction)).abs()
    }
}

fn luma(img: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = img.chw()?;
    if c != 3 {
        return Err(Error::dim(format!("expected RGB, got {c} channels")));
    }
    let d = img.data();
    let n = h * w;
    let y = (0..n)
        .map(|i| 0.299 * d[i] as f64 + 0.587 * d[n + i] as f64 + 0.114 * d[2 * n + i] as f64)
        .collect();
    Ok((y, h, w))
}

fn same_dims(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable filter over valid positions only.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let base = y * w + x;
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * src[base + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let e_aa = filter_valid(&prod(a, a), h, w, &g);
    let e_bb = filter_valid(&prod(b, b), h, w, &g);
    let e_ab = filter_valid(&prod(a, b), h, w, &g);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Gaussian-window SSIM on luma, averaged over valid window positions.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_dims(a, b)?;
    let (la, h, w) = luma(a)?;
    let (lb, _, _) = luma(b)?;
    ssim_plane(&la, &lb, h, w)
}

/// Sobel gradient magnitude of the luma, divided by its maximum (all zeros
/// for a flat image). Borders replicate the edge pixel.
pub fn sobel_magnitude(img: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (y, h, w) = luma(img)?;
    let at = |r: isize, c: isize| y[r.clamp(0, h as isize - 1) as usize * w + c.clamp(0, w as isize - 1) as usize];
    let mut mag = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1)
                - at(r - 1, c - 1)
                - 2.0 * at(r, c - 1)
                - at(r + 1, c - 1);
            let gy = at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1)
                - at(r - 1, c - 1)
                - 2.0 * at(r - 1, c)
                - at(r - 1, c + 1);
            mag[r as usize * w + c as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        mag.iter_mut().for_each(|v| *v /= max);
    }
    Ok((mag, h, w))
}

/// SSIM between the normalized Sobel edge maps.
pub fn ssim_edge(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_dims(a, b)?;
    let (ea, h, w) = sobel_magnitude(a)?;
    let (eb, _, _) = sobel_magnitude(b)?;
    ssim_plane(&ea, &eb, h, w)
}

/// Channel Gram matrix `F Fᵀ / (C·H·W)` of a `(C, H, W)` feature map.
pub fn gram(features: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = features.chw()?;
    let n = h * w;
    let d = features.data();
    let norm = (c * n) as f64;
    let mut g = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let fi = &d[i * n..(i + 1) * n];
            let fj = &d[j * n..(j + 1) * n];
            let s: f64 = fi.iter().zip(fj).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>() / norm;
            g[i * c + j] = s;
            g[j * c + i] = s;
        }
    }
    Ok(g)
}

/// Sum over the five encoder taps of the squared Frobenius distance between
/// Gram matrices.
pub fn gram_loss(result: &Tensor, style: &Tensor, encoder: &Encoder) -> Result<f64> {
    let ta = encoder.forward(result)?;
    let tb = encoder.forward(style)?;
    let mut total = 0.0;
    for (fa, fb) in ta.0.iter().zip(&tb.0) {
        let (ga, gb) = (gram(fa)?, gram(fb)?);
        total += ga.iter().zip(&gb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(total)
}

/// Root-mean-square difference: Frobenius distance over √N.
pub fn rms_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_dims(a, b)?;
    let ss: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok((ss / a.numel() as f64).sqrt())
}

/// Sum over the five encoder taps of the per-feature RMS distance.
pub fn perceptual_distance(a: &Tensor, b: &Tensor, encoder: &Encoder) -> Result<f64> {
    same_dims(a, b)?;
    let ta = encoder.forward(a)?;
    let tb = encoder.forward(b)?;
    ta.0.iter().zip(&tb.0).map(|(x, y)| rms_distance(x, y)).sum()
}

/// Scores candidate outputs against the oracle's outputs on the same
/// validation pairs `(content, style)`.
pub fn objective(
    candidate: &[Tensor],
    oracle: &[Tensor],
    pairs: &[(Tensor, Tensor)],
    code: ArchCode,
    weights: &ObjectiveWeights,
    encoder: &Encoder,
) -> Result<EvalReport> {
    weights.validate()?;
    if candidate.is_empty() || candidate.len() != oracle.len() || candidate.len() != pairs.len() {
        return Err(Error::Input(format!(
            "need equal non-empty output lists, got {} candidate, {} oracle, {} pairs",
            candidate.len(),
            oracle.len(),
            pairs.len()
        )));
    }
    let n = candidate.len() as f64;
    let (mut e, mut p, mut sw, mut se, mut gl) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((out, orc), (content, style)) in candidate.iter().zip(oracle).zip(pairs) {
        e += rms_distance(out, orc)?;
        p += perceptual_distance(out, orc, encoder)?;
        sw += ssim(content, out)?;
        se += ssim_edge(content, out)?;
        gl += gram_loss(out, style, encoder)?;
    }
    let (e, p) = (e / n, p / n);
    let o = code.op_fraction();
    Ok(EvalReport {
        ssim_whole: sw / n,
        ssim_edge: se / n,
        gram_loss: gl / n,
        recon_error: e,
        perceptual: p,
        op_fraction: o,
        overall: weights.combine(e, p, o),
    })
}
