//! Feature-statistics transfer: whitening-coloring (WCT) and AdaIN.
//!
//! Statistics and transforms are computed in `f64` and rounded to `f32` once
//! at the end, so results do not depend on the order pixels are visited in.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::INSTANCE_NORM_EPS;
use crate::tensor::{jacobi_eigen, Tensor, DEFAULT_MAX_SWEEPS};

pub const DEFAULT_EPSILON: f32 = 0.3;

/// Eigenvalues of `D + ε` at or below this fraction of the largest one are
/// treated as a null space when whitening.
const RELATIVE_RANK_CUTOFF: f64 = 1e-9;
const ABSOLUTE_RANK_CUTOFF: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransferKind {
    Wct,
    AdaIn,
}

impl fmt::Display for TransferKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransferKind::Wct => f.write_str("wct"),
            TransferKind::AdaIn => f.write_str("adain"),
        }
    }
}

impl FromStr for TransferKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wct" => Ok(TransferKind::Wct),
            "adain" => Ok(TransferKind::AdaIn),
            other => Err(Error::Input(format!("unknown transfer kind '{other}' (wct|adain)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferConfig {
    /// Added to the content eigenvalues before the inverse square root.
    pub epsilon: f32,
    /// 1 = fully transferred, 0 = untouched content features.
    pub blend: f32,
    pub kind: TransferKind,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            blend: 1.0,
            kind: TransferKind::Wct,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Input(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::Input(format!("blend must be in [0, 1], got {}", self.blend)));
        }
        Ok(())
    }
}

/// Mean, centered features and covariance of a `(C, H, W)` map viewed as a
/// `C × HW` matrix.
#[derive(Clone, Debug)]
pub struct FeatureStats {
    pub channels: usize,
    pub pixels: usize,
    pub mean: Vec<f64>,
    /// Row-major `C × HW`.
    pub centered: Vec<f64>,
    /// Row-major `C × C`, normalized by `max(1, HW - 1)`.
    pub covariance: Vec<f64>,
}

impl FeatureStats {
    pub fn from_features(x: &Tensor) -> Result<Self> {
        let (c, h, w) = x.chw()?;
        Ok(Self::from_matrix(x.data(), c, h * w))
    }

    fn from_matrix(data: &[f32], c: usize, n: usize) -> Self {
        let mut mean = vec![0.0f64; c];
        let mut centered = vec![0.0f64; c * n];
        for ch in 0..c {
            let row = &data[ch * n..(ch + 1) * n];
            let m = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            mean[ch] = m;
            for (dst, &v) in centered[ch * n..(ch + 1) * n].iter_mut().zip(row) {
                *dst = v as f64 - m;
            }
        }
        let denom = (n.saturating_sub(1)).max(1) as f64;
        let mut covariance = vec![0.0f64; c * c];
        for i in 0..c {
            let ri = &centered[i * n..(i + 1) * n];
            for j in i..c {
                let rj = &centered[j * n..(j + 1) * n];
                let s = ri.iter().zip(rj).map(|(a, b)| a * b).sum::<f64>() / denom;
                covariance[i * c + j] = s;
                covariance[j * c + i] = s;
            }
        }
        Self {
            channels: c,
            pixels: n,
            mean,
            centered,
            covariance,
        }
    }
}

/// `E g(D) Eᵀ` for the covariance eigendecomposition, where eigenvalues in the
/// null space map to 0.
fn spectral_map(cov: &[f64], c: usize, shift: f64, power: f64) -> Vec<f64> {
    let eig = jacobi_eigen(cov, c, DEFAULT_MAX_SWEEPS);
    // Round-off on PSD matrices can leave tiny negative eigenvalues.
    let values: Vec<f64> = eig.values.iter().map(|&d| d.max(0.0) + shift).collect();
    let top = values.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = (RELATIVE_RANK_CUTOFF * top).max(ABSOLUTE_RANK_CUTOFF);
    let scaled: Vec<f64> = values
        .iter()
        .map(|&v| if v > cutoff { v.powf(power) } else { 0.0 })
        .collect();
    let e = &eig.vectors;
    let mut out = vec![0.0f64; c * c];
    for i in 0..c {
        for j in i..c {
            let s: f64 = (0..c).map(|k| e[i * c + k] * scaled[k] * e[j * c + k]).sum();
            out[i * c + j] = s;
            out[j * c + i] = s;
        }
    }
    out
}

fn apply(m: &[f64], x: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; rows * cols];
    for i in 0..rows {
        let orow = &mut out[i * cols..(i + 1) * cols];
        for k in 0..inner {
            let a = m[i * inner + k];
            if a == 0.0 {
                continue;
            }
            for (o, &xv) in orow.iter_mut().zip(&x[k * cols..(k + 1) * cols]) {
                *o += a * xv;
            }
        }
    }
    out
}

/// Whitened content features `E_c (D_c + ε)^{-1/2} E_cᵀ f_c` as a `C × HW`
/// matrix.
pub fn whiten(stats: &FeatureStats, epsilon: f32) -> Result<Tensor> {
    if stats.pixels == 0 || stats.channels == 0 {
        return Err(Error::Precondition("whitening needs a non-empty feature map".into()));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Precondition(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let (c, n) = (stats.channels, stats.pixels);
    let w = spectral_map(&stats.covariance, c, epsilon as f64, -0.5);
    let out = apply(&w, &stats.centered, c, c, n);
    Tensor::new(&[c, n], out.into_iter().map(|v| v as f32).collect())
}

/// Precomputed style-side statistics for one transfer site, reusable across
/// many content inputs.
#[derive(Clone, Debug)]
pub struct StyleStatistics {
    pub channels: usize,
    pub mean: Vec<f64>,
    /// `E_s D_s^{1/2} E_sᵀ`, row-major `C × C`.
    pub coloring: Vec<f64>,
    /// Per-channel population standard deviation (AdaIN).
    pub std: Vec<f64>,
}

impl StyleStatistics {
    pub fn from_features(style: &Tensor) -> Result<Self> {
        let stats = FeatureStats::from_features(style)?;
        let c = stats.channels;
        let coloring = spectral_map(&stats.covariance, c, 0.0, 0.5);
        let n = stats.pixels as f64;
        let std = (0..c)
            .map(|ch| {
                let row = &stats.centered[ch * stats.pixels..(ch + 1) * stats.pixels];
                (row.iter().map(|v| v * v).sum::<f64>() / n).sqrt()
            })
            .collect();
        Ok(Self {
            channels: c,
            mean: stats.mean,
            coloring,
            std,
        })
    }
}

fn check_channels(content: &Tensor, style: &StyleStatistics) -> Result<(usize, usize, usize)> {
    let (c, h, w) = content.chw()?;
    if c != style.channels {
        return Err(Error::dim(format!(
            "content has {c} channels, style has {}",
            style.channels
        )));
    }
    Ok((c, h, w))
}

fn blend(content: &Tensor, transferred: Vec<f64>, amount: f32) -> Result<Tensor> {
    if amount == 0.0 {
        return Ok(content.clone());
    }
    let a = amount as f64;
    let data = transferred
        .into_iter()
        .zip(content.data())
        .map(|(t, &c)| if amount == 1.0 { t as f32 } else { (a * t + (1.0 - a) * c as f64) as f32 })
        .collect();
    Tensor::new(content.shape(), data)
}

/// Whitening-coloring transform of `content` toward precomputed style
/// statistics.
pub fn wct_with(content: &Tensor, style: &StyleStatistics, config: &TransferConfig) -> Result<Tensor> {
    config.validate()?;
    let (c, h, w) = check_channels(content, style)?;
    if config.blend == 0.0 {
        return Ok(content.clone());
    }
    let stats = FeatureStats::from_matrix(content.data(), c, h * w);
    let whitening = spectral_map(&stats.covariance, c, config.epsilon as f64, -0.5);
    let transform = apply(&style.coloring, &whitening, c, c, c);
    let mut out = apply(&transform, &stats.centered, c, c, h * w);
    for ch in 0..c {
        let m = style.mean[ch];
        out[ch * h * w..(ch + 1) * h * w].iter_mut().for_each(|v| *v += m);
    }
    blend(content, out, config.blend)
}

pub fn wct(content: &Tensor, style: &Tensor, config: &TransferConfig) -> Result<Tensor> {
    wct_with(content, &StyleStatistics::from_features(style)?, config)
}

/// Per-channel mean/std alignment toward precomputed style statistics.
pub fn adain_with(content: &Tensor, style: &StyleStatistics, config: &TransferConfig) -> Result<Tensor> {
    config.validate()?;
    let (c, h, w) = check_channels(content, style)?;
    if config.blend == 0.0 {
        return Ok(content.clone());
    }
    let n = h * w;
    let mut out = vec![0.0f64; c * n];
    for ch in 0..c {
        let row = &content.data()[ch * n..(ch + 1) * n];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = style.std[ch] / (var + INSTANCE_NORM_EPS as f64).sqrt();
        for (o, &v) in out[ch * n..(ch + 1) * n].iter_mut().zip(row) {
            *o = scale * (v as f64 - mean) + style.mean[ch];
        }
    }
    blend(content, out, config.blend)
}

pub fn adain(content: &Tensor, style: &Tensor, config: &TransferConfig) -> Result<Tensor> {
    adain_with(content, &StyleStatistics::from_features(style)?, config)
}

/// Dispatches on `config.kind`.
pub fn transfer_with(content: &Tensor, style: &StyleStatistics, config: &TransferConfig) -> Result<Tensor> {
    match config.kind {
        TransferKind::Wct => wct_with(content, style, config),
        TransferKind::AdaIn => adain_with(content, style, config),
    }
}
