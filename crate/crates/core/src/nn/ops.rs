use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INSTANCE_NORM_EPS: f32 = 1e-5;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient is passed where `x > 0`; zero at exactly 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape(x, grad_out, "relu_backward")?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Result of 2×2 max pooling: the pooled map plus, per output cell, the flat
/// input index of the winner.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolRecord {
    pub pooled: Tensor,
    pub argmax: Vec<usize>,
    pub input_shape: [usize; 3],
}

/// 2×2 stride-2 max pooling; ties go to the smallest flat index.
pub fn maxpool2(x: &Tensor) -> Result<PoolRecord> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("maxpool2 needs even H and W, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let d = x.data();
    let mut pooled = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = ch * h * w + 2 * y * w + 2 * xx;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                pooled.push(d[best]);
                argmax.push(best);
            }
        }
    }
    Ok(PoolRecord {
        pooled: Tensor::new(&[c, oh, ow], pooled)?,
        argmax,
        input_shape: [c, h, w],
    })
}

/// Scatters the pooled values back to their argmax cells; zeros elsewhere.
pub fn unpool(record: &PoolRecord) -> Tensor {
    unpool_values(record, &record.pooled).expect("record is self-consistent")
}

/// Scatters `values` (shaped like the pooled map) to the recorded argmax cells.
/// Doubles as the gradient of [`maxpool2`].
pub fn unpool_values(record: &PoolRecord, values: &Tensor) -> Result<Tensor> {
    same_shape(&record.pooled, values, "unpool")?;
    let mut out = Tensor::zeros(&record.input_shape);
    for (&idx, &v) in record.argmax.iter().zip(values.data()) {
        out.data_mut()[idx] = v;
    }
    Ok(out)
}

/// Nearest-neighbour ×2 upsampling: each cell becomes a 2×2 block.
pub fn upsample_nearest(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let (oh, ow) = (2 * h, 2 * w);
    let d = x.data();
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let src = &d[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            let dst = &mut out[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
            for (xx, o) in dst.iter_mut().enumerate() {
                *o = src[xx / 2];
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

pub fn upsample_nearest_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (c, oh, ow) = grad_out.chw()?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::dim(format!("upsample gradient must be even-sized, got {oh}x{ow}")));
    }
    let (h, w) = (oh / 2, ow / 2);
    let g = grad_out.data();
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(ch * h + y / 2) * w + xx / 2] += g[(ch * oh + y) * ow + xx];
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Nearest-neighbour resampling with source index `floor(i * H / target_h)`.
pub fn resize_nearest(x: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if target_h == 0 || target_w == 0 {
        return Err(Error::dim("resize target must be at least 1x1"));
    }
    if (target_h, target_w) == (h, w) {
        return Ok(x.clone());
    }
    let d = x.data();
    let mut out = Vec::with_capacity(c * target_h * target_w);
    for ch in 0..c {
        for y in 0..target_h {
            let sy = y * h / target_h;
            for xx in 0..target_w {
                let sx = xx * w / target_w;
                out.push(d[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new(&[c, target_h, target_w], out)
}

pub fn resize_nearest_backward(grad_out: &Tensor, src_h: usize, src_w: usize) -> Result<Tensor> {
    let (c, th, tw) = grad_out.chw()?;
    let g = grad_out.data();
    let mut out = vec![0.0f32; c * src_h * src_w];
    for ch in 0..c {
        for y in 0..th {
            let sy = y * src_h / th;
            for xx in 0..tw {
                let sx = xx * src_w / tw;
                out[(ch * src_h + sy) * src_w + sx] += g[(ch * th + y) * tw + xx];
            }
        }
    }
    Tensor::new(&[c, src_h, src_w], out)
}

/// Per-channel mean and population variance over the spatial dims.
fn channel_moments(plane: &[f32]) -> (f32, f32) {
    let n = plane.len() as f64;
    let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean as f32, var as f32)
}

/// Parameter-free instance normalization: `(x - μ) / sqrt(σ² + 1e-5)` per
/// channel.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let hw = h * w;
    let mut out = x.clone();
    for ch in 0..c {
        let plane = &mut out.data_mut()[ch * hw..(ch + 1) * hw];
        let (mean, var) = channel_moments(plane);
        let inv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        for v in plane.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Ok(out)
}

pub fn instance_norm_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape(x, grad_out, "instance_norm_backward")?;
    let (c, h, w) = x.chw()?;
    let hw = h * w;
    let n = hw as f32;
    let mut out = vec![0.0f32; c * hw];
    for ch in 0..c {
        let xs = &x.data()[ch * hw..(ch + 1) * hw];
        let gs = &grad_out.data()[ch * hw..(ch + 1) * hw];
        let (mean, var) = channel_moments(xs);
        let inv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        let mut g_mean = 0.0f32;
        let mut gy_mean = 0.0f32;
        for (&xv, &gv) in xs.iter().zip(gs) {
            g_mean += gv;
            gy_mean += gv * (xv - mean) * inv;
        }
        g_mean /= n;
        gy_mean /= n;
        for ((o, &xv), &gv) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(xs).zip(gs) {
            let y = (xv - mean) * inv;
            *o = inv * (gv - g_mean - y * gy_mean);
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Channel concatenation in argument order.
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::dim("concat of zero maps"))?;
    let (_, h, w) = first.chw()?;
    let mut channels = 0;
    let mut data = Vec::new();
    for x in xs {
        let (c, xh, xw) = x.chw()?;
        if (xh, xw) != (h, w) {
            return Err(Error::dim(format!("concat spatial mismatch: {h}x{w} vs {xh}x{xw}")));
        }
        channels += c;
        data.extend_from_slice(x.data());
    }
    Tensor::new(&[channels, h, w], data)
}

/// Inverse of [`concat_channels`].
pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let (c, h, w) = x.chw()?;
    if sizes.iter().sum::<usize>() != c {
        return Err(Error::dim(format!("split sizes {sizes:?} do not sum to {c} channels")));
    }
    let mut offset = 0;
    sizes
        .iter()
        .map(|&s| {
            let part = x.data()[offset * h * w..(offset + s) * h * w].to_vec();
            offset += s;
            Tensor::new(&[s, h, w], part)
        })
        .collect()
}

pub fn sum_maps(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::dim("sum of zero maps"))?;
    first.chw()?;
    let mut out = (*first).clone();
    for x in &xs[1..] {
        same_shape(first, x, "sum_maps")?;
        for (o, v) in out.data_mut().iter_mut().zip(x.data()) {
            *o += v;
        }
    }
    Ok(out)
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
