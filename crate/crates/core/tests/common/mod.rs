//! Independent f64 reference implementations shared by the integration tests
//! and the acceptance runner.
#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylenas::arch::{ArchCode, Encoder, NetworkGraph};
use stylenas::nn;
use stylenas::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
}

pub fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(&[3, h, w], |_| rng.gen_range(0.0f32..1.0))
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn reflect(i: isize, n: usize) -> usize {
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

pub fn conv_ref(x: &[f64], w: &[f64], b: &[f64], ci: usize, co: usize, h: usize, wd: usize) -> Vec<f64> {
    let mut out = vec![0.0; co * h * wd];
    for o in 0..co {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b[o];
                for i in 0..ci {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = reflect(y as isize + ky as isize - 1, h);
                            let sx = reflect(xx as isize + kx as isize - 1, wd);
                            acc += w[((o * ci + i) * 3 + ky) * 3 + kx] * x[(i * h + sy) * wd + sx];
                        }
                    }
                }
                out[(o * h + y) * wd + xx] = acc;
            }
        }
    }
    out
}

pub fn relu_ref(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn maxpool_ref(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for ch in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let mut m = f64::NEG_INFINITY;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    m = m.max(x[(ch * h + 2 * y + dy) * w + 2 * xx + dx]);
                }
                out.push(m);
            }
        }
    }
    out
}

pub fn resize_ref(x: &[f64], c: usize, h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * th * tw);
    for ch in 0..c {
        for y in 0..th {
            for xx in 0..tw {
                out.push(x[(ch * h + y * h / th) * w + xx * w / tw]);
            }
        }
    }
    out
}

pub fn instance_norm_ref(x: &[f64], c: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        let p = &x[ch * n..(ch + 1) * n];
        let mean = p.iter().sum::<f64>() / n as f64;
        let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for (o, v) in out[ch * n..(ch + 1) * n].iter_mut().zip(p) {
            *o = (v - mean) * inv;
        }
    }
    out
}

/// Central-difference check of `analytic` against `f` projected on a random
/// cotangent. Probes that `near_kink` flags as sitting next to a
/// non-differentiable point are skipped. Returns the largest
/// relative error.
pub fn fd_check(
    x: &[f64],
    f: &dyn Fn(&[f64]) -> Vec<f64>,
    cotangent: &[f64],
    analytic: &[f32],
    probes: usize,
    rng: &mut impl Rng,
    near_kink: &dyn Fn(&[f64], usize) -> bool,
) -> f64 {
    const H: f64 = 1e-6;
    let dot = |y: Vec<f64>| y.iter().zip(cotangent).map(|(a, b)| a * b).sum::<f64>();
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut attempts = 0;
    while done < probes && attempts < probes * 20 {
        attempts += 1;
        let i = rng.gen_range(0..x.len());
        if near_kink(x, i) {
            continue;
        }
        let mut xp = x.to_vec();
        xp[i] += H;
        let mut xm = x.to_vec();
        xm[i] -= H;
        let numeric = (dot(f(&xp)) - dot(f(&xm))) / (2.0 * H);
        let a = analytic[i] as f64;
        let scale = a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((a - numeric).abs() / scale);
        done += 1;
    }
    assert_eq!(done, probes, "too many probes rejected as kinks");
    worst
}

fn never(_: &[f64], _: usize) -> bool {
    false
}

/// Largest relative finite-difference error per differentiable op.
pub fn op_gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    const PROBES: usize = 50;
    let mut r = rng(seed);
    let (c, h, w) = (4, 8, 8);
    let mut out = Vec::new();

    // conv: input, weight and bias.
    let co = 3;
    let layer = nn::ConvLayer::random(c, co, &mut r);
    let x = random_tensor(&[c, h, w], &mut r);
    let g = random_tensor(&[co, h, w], &mut r);
    let grads = nn::conv_backward(&layer, &x, &g).unwrap();
    let (xw, wf, bf, gf) = (to_f64(&x), to_f64(&layer.weight), to_f64(&layer.bias), to_f64(&g));
    let e = fd_check(
        &xw,
        &|v| conv_ref(v, &wf, &bf, c, co, h, w),
        &gf,
        grads.grad_x.as_ref().unwrap().data(),
        PROBES,
        &mut r,
        &never,
    );
    out.push(("conv3x3 input", e));
    let e = fd_check(
        &wf,
        &|v| conv_ref(&xw, v, &bf, c, co, h, w),
        &gf,
        grads.grad_w.data(),
        PROBES,
        &mut r,
        &never,
    );
    out.push(("conv3x3 weight", e));
    let e = fd_check(
        &bf,
        &|v| conv_ref(&xw, &wf, v, c, co, h, w),
        &gf,
        grads.grad_b.data(),
        PROBES,
        &mut r,
        &never,
    );
    out.push(("conv3x3 bias", e));

    let x = random_tensor(&[c, h, w], &mut r);
    let g = random_tensor(&[c, h, w], &mut r);
    let an = nn::relu_backward(&x, &g).unwrap();
    let e = fd_check(&to_f64(&x), &relu_ref, &to_f64(&g), an.data(), PROBES, &mut r, &|v, i| v[i].abs() < 1e-4);
    out.push(("relu", e));

    let x = random_tensor(&[c, h, w], &mut r);
    let g = random_tensor(&[c, h / 2, w / 2], &mut r);
    let rec = nn::maxpool2(&x).unwrap();
    let an = nn::unpool_values(&rec, &g).unwrap();
    let xf = to_f64(&x);
    let window_gap = move |v: &[f64], i: usize| {
        // Skip inputs within reach of a tie in their pooling window.
        let (ch, y, xx) = (i / (h * w), (i / w) % h, i % w);
        let (by, bx) = (y / 2 * 2, xx / 2 * 2);
        [(0, 0), (0, 1), (1, 0), (1, 1)]
            .iter()
            .map(|(dy, dx)| (ch * h + by + dy) * w + bx + dx)
            .any(|j| j != i && (v[j] - v[i]).abs() < 1e-4)
    };
    let e = fd_check(&xf, &|v| maxpool_ref(v, c, h, w), &to_f64(&g), an.data(), PROBES, &mut r, &window_gap);
    out.push(("maxpool2", e));

    let x = random_tensor(&[c, h / 2, w / 2], &mut r);
    let g = random_tensor(&[c, h, w], &mut r);
    let an = nn::upsample_nearest_backward(&g).unwrap();
    let e = fd_check(
        &to_f64(&x),
        &|v| resize_ref(v, c, h / 2, w / 2, h, w),
        &to_f64(&g),
        an.data(),
        PROBES,
        &mut r,
        &never,
    );
    out.push(("upsample_nearest", e));

    let x = random_tensor(&[c, h, w], &mut r);
    let g = random_tensor(&[c, 3, 5], &mut r);
    let an = nn::resize_nearest_backward(&g, h, w).unwrap();
    let e = fd_check(
        &to_f64(&x),
        &|v| resize_ref(v, c, h, w, 3, 5),
        &to_f64(&g),
        an.data(),
        PROBES,
        &mut r,
        &never,
    );
    out.push(("resize_nearest", e));

    let x = random_tensor(&[c, h, w], &mut r).map(|v| 2.0 * v + 0.5);
    let g = random_tensor(&[c, h, w], &mut r);
    let an = nn::instance_norm_backward(&x, &g).unwrap();
    let e = fd_check(
        &to_f64(&x),
        &|v| instance_norm_ref(v, c, h * w),
        &to_f64(&g),
        an.data(),
        PROBES,
        &mut r,
        &never,
    );
    out.push(("instance_norm", e));

    // concat's adjoint is split.
    let a = random_tensor(&[2, h, w], &mut r);
    let b = random_tensor(&[3, h, w], &mut r);
    let g = random_tensor(&[5, h, w], &mut r);
    let parts = nn::split_channels(&g, &[2, 3]).unwrap();
    let mut an = parts[0].data().to_vec();
    an.extend_from_slice(parts[1].data());
    let mut ab = to_f64(&a);
    ab.extend(to_f64(&b));
    let e = fd_check(&ab, &|v| v.to_vec(), &to_f64(&g), &an, PROBES, &mut r, &never);
    out.push(("concat_channels", e));
    out
}

/// Relative error between the analytic reconstruction-loss gradient and a
/// central difference, probing the largest-gradient weight and bias of every
/// decoder layer. The forward pass is f32: small steps drown in rounding and
/// large ones cross ReLU kinks, so each probe keeps the best of three steps.
/// Returns (layer, error) pairs.
pub fn end_to_end_gradient(code: ArchCode, seed: u64) -> Vec<(String, f64)> {
    const STEPS: [f32; 3] = [5e-3, 1e-3, 2e-4];
    let encoder = Arc::new(Encoder::seeded(2, seed).unwrap());
    let mut graph = NetworkGraph::new(code, encoder.clone(), seed);
    let mut r = rng(seed ^ 0x5eed);
    // Zero-initialized biases put ReLUs fed by a 1×1 normalized bottleneck
    // exactly on their kink.
    for layer in graph.decoder_layers_mut().values_mut() {
        layer.bias.data_mut().iter_mut().for_each(|b| *b += r.gen_range(-0.05f32..0.05));
    }
    let image = random_image(16, 16, &mut r);
    let taps = encoder.forward(&image).unwrap();
    let (_, grads) = graph.reconstruction_grads(&taps, &image).unwrap();
    let loss_at = |g: &NetworkGraph| g.reconstruction_grads(&taps, &image).unwrap().0;
    let mut out = Vec::new();
    for (name, (gw, gb)) in &grads.0 {
        let argmax = |t: &Tensor| {
            (0..t.numel())
                .max_by(|&a, &b| t.data()[a].abs().total_cmp(&t.data()[b].abs()))
                .unwrap()
        };
        let (kw, kb) = (argmax(gw), argmax(gb));
        for (is_bias, idx, analytic) in [(false, kw, gw.data()[kw]), (true, kb, gb.data()[kb])] {
            let probe = |delta: f32| {
                let mut g = graph.clone();
                let layer = g.decoder_layers_mut().get_mut(name).unwrap();
                let t = if is_bias { &mut layer.bias } else { &mut layer.weight };
                t.data_mut()[idx] += delta;
                loss_at(&g)
            };
            let a = analytic as f64;
            let err = STEPS
                .iter()
                .map(|&h| {
                    let numeric = (probe(h) - probe(-h)) / (2.0 * h as f64);
                    (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4)
                })
                .fold(f64::INFINITY, f64::min);
            let label = format!("{name}.{}", if is_bias { "bias" } else { "weight" });
            out.push((label, err));
        }
    }
    out
}

/// Direct-formula SSIM on luma: Gaussian window σ=1.5, 11×11, valid
/// positions only, computed per window with an explicit double sum.
pub fn ssim_direct(a: &Tensor, b: &Tensor) -> f64 {
    let (_, h, w) = a.chw().unwrap();
    let luma = |t: &Tensor| -> Vec<f64> {
        let d = t.data();
        (0..h * w)
            .map(|i| 0.299 * d[i] as f64 + 0.587 * d[h * w + i] as f64 + 0.114 * d[2 * h * w + i] as f64)
            .collect()
    };
    let (la, lb) = (luma(a), luma(b));
    let mut k = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (y, row) in k.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (y as f64 - 5.0, x as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (ky, row) in k.iter().enumerate() {
                for (kx, &kv) in row.iter().enumerate() {
                    let wgt = kv / total;
                    let i = (y0 + ky) * w + x0 + kx;
                    ma += wgt * la[i];
                    mb += wgt * lb[i];
                    saa += wgt * la[i] * la[i];
                    sbb += wgt * lb[i] * lb[i];
                    sab += wgt * la[i] * lb[i];
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

/// Per-channel mean and `HW-1` covariance of a `(C, H, W)` feature map.
pub fn moments(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = t.chw().unwrap();
    let n = h * w;
    let d = to_f64(t);
    let mean: Vec<f64> = (0..c).map(|ch| d[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            cov[i * c + j] = (0..n)
                .map(|p| (d[i * n + p] - mean[i]) * (d[j * n + p] - mean[j]))
                .sum::<f64>()
                / (n as f64 - 1.0).max(1.0);
        }
    }
    (mean, cov)
}

/// Correlated full-rank features: a random mixing of standard noise plus a
/// per-channel offset.
pub fn correlated_features(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    let n = h * w;
    let z: Vec<f64> = (0..c * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mix: Vec<f64> = (0..c * c)
        .map(|k| if k % (c + 1) == 0 { 1.5 } else { rng.gen_range(-0.5..0.5) })
        .collect();
    let offset: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::from_fn(&[c, h, w], |idx| {
        let (ch, p) = (idx / n, idx % n);
        let v: f64 = (0..c).map(|k| mix[ch * c + k] * z[k * n + p]).sum();
        (v + offset[ch]) as f32
    })
}
