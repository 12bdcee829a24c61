use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 3×3, stride 1 convolution with one pixel of reflection padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `(C_out, C_in, 3, 3)`
    pub weight: Tensor,
    /// `(C_out)`
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub grad_x: Option<Tensor>,
    pub grad_w: Tensor,
    pub grad_b: Tensor,
}

impl ConvLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        match weight.shape() {
            &[co, _, 3, 3] if bias.shape() == [co] => Ok(Self { weight, bias }),
            _ => Err(Error::dim(format!(
                "conv weight must be (C_out, C_in, 3, 3) with bias (C_out), got {:?} / {:?}",
                weight.shape(),
                bias.shape()
            ))),
        }
    }

    /// He-uniform weights, zero bias.
    pub fn random(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (9.0 * c_in as f32)).sqrt();
        let weight = Tensor::from_fn(&[c_out, c_in, 3, 3], |_| rng.gen_range(-bound..bound));
        Self {
            weight,
            bias: Tensor::zeros(&[c_out]),
        }
    }

    /// Kernel whose only non-zero tap is the centre of the diagonal, i.e.
    /// output channel `k` copies input channel `k`.
    pub fn identity(channels: usize) -> Self {
        let mut weight = Tensor::zeros(&[channels, channels, 3, 3]);
        for k in 0..channels {
            weight.data_mut()[(k * channels + k) * 9 + 4] = 1.0;
        }
        Self {
            weight,
            bias: Tensor::zeros(&[channels]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Mirror index into `0..n` (reflection without repeating the edge). A single
/// row or column has nothing to reflect, so it repeats.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

fn reflect_pad(x: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0f32; c * ph * pw];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ph * pw..(ch + 1) * ph * pw];
        for py in 0..ph {
            let sy = reflect(py as isize - 1, h);
            let row = &src[sy * w..(sy + 1) * w];
            let drow = &mut dst[py * pw..(py + 1) * pw];
            drow[1..w + 1].copy_from_slice(row);
            drow[0] = row[reflect(-1, w)];
            drow[w + 1] = row[reflect(w as isize, w)];
        }
    }
    out
}

/// Adds the gradient of a padded buffer back onto the unpadded input.
fn fold_pad_grad(gp: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let src = &gp[ch * ph * pw..(ch + 1) * ph * pw];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for py in 0..ph {
            let sy = reflect(py as isize - 1, h);
            for px in 0..pw {
                let sx = reflect(px as isize - 1, w);
                dst[sy * w + sx] += src[py * pw + px];
            }
        }
    }
    out
}

fn check_input(layer: &ConvLayer, x: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = x.chw()?;
    if c != layer.in_channels() {
        return Err(Error::dim(format!(
            "conv expects {} input channels, got {c}",
            layer.in_channels()
        )));
    }
    Ok((c, h, w))
}

pub fn conv_forward(layer: &ConvLayer, x: &Tensor) -> Result<Tensor> {
    let (ci_n, h, w) = check_input(layer, x)?;
    let co_n = layer.out_channels();
    let pw = w + 2;
    let padded = reflect_pad(x.data(), ci_n, h, w);
    let wt = layer.weight.data();
    let mut out = vec![0.0f32; co_n * h * w];
    for co in 0..co_n {
        let plane = &mut out[co * h * w..(co + 1) * h * w];
        plane.fill(layer.bias.data()[co]);
        for ci in 0..ci_n {
            let src = &padded[ci * (h + 2) * pw..(ci + 1) * (h + 2) * pw];
            let k = &wt[(co * ci_n + ci) * 9..(co * ci_n + ci + 1) * 9];
            for y in 0..h {
                let orow = &mut plane[y * w..(y + 1) * w];
                for ky in 0..3 {
                    let srow = &src[(y + ky) * pw..(y + ky) * pw + pw];
                    let (k0, k1, k2) = (k[ky * 3], k[ky * 3 + 1], k[ky * 3 + 2]);
                    for (x, o) in orow.iter_mut().enumerate() {
                        *o += k0 * srow[x] + k1 * srow[x + 1] + k2 * srow[x + 2];
                    }
                }
            }
        }
    }
    Tensor::new(&[co_n, h, w], out)
}

/// Exact reverse-mode gradients of [`conv_forward`].
pub fn conv_backward(layer: &ConvLayer, x: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    conv_backward_impl(layer, x, grad_out, true)
}

pub(crate) fn conv_backward_impl(
    layer: &ConvLayer,
    x: &Tensor,
    grad_out: &Tensor,
    need_grad_x: bool,
) -> Result<ConvGrads> {
    let (ci_n, h, w) = check_input(layer, x)?;
    let co_n = layer.out_channels();
    if grad_out.shape() != [co_n, h, w] {
        return Err(Error::dim(format!(
            "conv grad_out must be {:?}, got {:?}",
            [co_n, h, w],
            grad_out.shape()
        )));
    }
    let pw = w + 2;
    let psize = (h + 2) * pw;
    let padded = reflect_pad(x.data(), ci_n, h, w);
    let wt = layer.weight.data();
    let go = grad_out.data();

    let grad_b: Vec<f32> = (0..co_n)
        .map(|co| go[co * h * w..(co + 1) * h * w].iter().sum())
        .collect();

    let mut grad_w = vec![0.0f32; co_n * ci_n * 9];
    let mut grad_pad = if need_grad_x {
        vec![0.0f32; ci_n * psize]
    } else {
        Vec::new()
    };
    for co in 0..co_n {
        let g = &go[co * h * w..(co + 1) * h * w];
        for ci in 0..ci_n {
            let src = &padded[ci * psize..(ci + 1) * psize];
            let kidx = (co * ci_n + ci) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut acc = 0.0f32;
                    for y in 0..h {
                        let srow = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                        let grow = &g[y * w..(y + 1) * w];
                        acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f32>();
                    }
                    grad_w[kidx + ky * 3 + kx] = acc;
                }
            }
            if need_grad_x {
                let dst = &mut grad_pad[ci * psize..(ci + 1) * psize];
                let k = &wt[kidx..kidx + 9];
                for y in 0..h {
                    let grow = &g[y * w..(y + 1) * w];
                    for ky in 0..3 {
                        let drow = &mut dst[(y + ky) * pw..(y + ky) * pw + pw];
                        let (k0, k1, k2) = (k[ky * 3], k[ky * 3 + 1], k[ky * 3 + 2]);
                        for (x, &gv) in grow.iter().enumerate() {
                            drow[x] += k0 * gv;
                            drow[x + 1] += k1 * gv;
                            drow[x + 2] += k2 * gv;
                        }
                    }
                }
            }
        }
    }
    let grad_x = if need_grad_x {
        Some(Tensor::new(&[ci_n, h, w], fold_pad_grad(&grad_pad, ci_n, h, w))?)
    } else {
        None
    };
    Ok(ConvGrads {
        grad_x,
        grad_w: Tensor::new(&[co_n, ci_n, 3, 3], grad_w)?,
        grad_b: Tensor::new(&[co_n], grad_b)?,
    })
}

/// Multiply-accumulate count of one [`conv_forward`] call.
pub fn conv_macs(c_in: usize, c_out: usize, h: usize, w: usize) -> u64 {
    (c_in * c_out * 9 * h * w) as u64
}
