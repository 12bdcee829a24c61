//! Decoder training by image reconstruction. The encoder stays fixed and
//! every transfer site is skipped.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::arch::{Encoder, EncoderTaps, Gradients, NetworkGraph, SIZE_MULTIPLE};
use crate::error::{Error, Result};
use crate::io::image::{list_ppms, read_ppm};
use crate::tensor::Tensor;

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Side length of procedural training images.
    pub image_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 4,
            learning_rate: 1e-3,
            seed: 0,
            image_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("train steps must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("train batch must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.image_size == 0 || self.image_size % SIZE_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "image size must be a positive multiple of {SIZE_MULTIPLE}, got {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Adam with the usual bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    t: i32,
    moments: BTreeMap<String, [Vec<f32>; 4]>,
}

impl Adam {
    pub fn new(learning_rate: f32) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, graph: &mut NetworkGraph, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let lr = self.learning_rate;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (name, layer) in graph.decoder_layers_mut().iter_mut() {
            let Some((gw, gb)) = grads.0.get(name) else {
                continue;
            };
            let m = self.moments.entry(name.clone()).or_insert_with(|| {
                [
                    vec![0.0; gw.numel()],
                    vec![0.0; gw.numel()],
                    vec![0.0; gb.numel()],
                    vec![0.0; gb.numel()],
                ]
            });
            let [mw, vw, mb, vb] = m;
            for (param, grad, m, v) in [
                (layer.weight.data_mut(), gw.data(), mw, vw),
                (layer.bias.data_mut(), gb.data(), mb, vb),
            ] {
                for i in 0..param.len() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    param[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Training or validation images: RGB in `[0, 1]` with sides divisible by 16.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    images: Vec<Tensor>,
}

impl Corpus {
    pub fn new(images: Vec<Tensor>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Input("corpus is empty".into()));
        }
        for img in &images {
            Encoder::check_image(img)?;
            if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Input("corpus images must lie in [0, 1]".into()));
            }
        }
        Ok(Self { images })
    }

    /// Seeded synthetic photos: smooth gradients, checkerboards, low-pass
    /// noise, and shapes composited over a gradient, in rotation.
    pub fn procedural(count: usize, size: usize, seed: u64) -> Result<Self> {
        if size == 0 || size % SIZE_MULTIPLE != 0 {
            return Err(Error::Input(format!("image size {size} is not a multiple of {SIZE_MULTIPLE}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..count).map(|i| procedural_image(i % 4, size, &mut rng)).collect();
        Self::new(images)
    }

    /// Every `.ppm` in `dir`, in file-name order.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let images = list_ppms(dir)?.iter().map(|p| read_ppm(p)).collect::<Result<Vec<_>>>()?;
        Self::new(images)
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn procedural_image(kind: usize, s: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = s * s;
    let mut data = vec![0.0f32; 3 * n];
    let gradient = |rng: &mut ChaCha8Rng, data: &mut [f32]| {
        let (a, b) = (random_color(rng), random_color(rng));
        let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let (dx, dy) = (angle.cos(), angle.sin());
        for y in 0..s {
            for x in 0..s {
                let u = ((x as f32 / s as f32 - 0.5) * dx + (y as f32 / s as f32 - 0.5) * dy) / 1.42 + 0.5;
                for c in 0..3 {
                    data[c * n + y * s + x] = a[c] + (b[c] - a[c]) * u;
                }
            }
        }
    };
    match kind {
        0 => gradient(rng, &mut data),
        1 => {
            let cell = [2, 4, 8][rng.gen_range(0..3)];
            let (a, b) = (random_color(rng), random_color(rng));
            for y in 0..s {
                for x in 0..s {
                    let col = if (x / cell + y / cell) % 2 == 0 { a } else { b };
                    for c in 0..3 {
                        data[c * n + y * s + x] = col[c];
                    }
                }
            }
        }
        2 => {
            data.iter_mut().for_each(|v| *v = rng.gen());
            let r = rng.gen_range(1..=3usize);
            for c in 0..3 {
                let plane = &mut data[c * n..(c + 1) * n];
                for _ in 0..2 {
                    box_blur(plane, s, r);
                }
            }
        }
        _ => {
            gradient(rng, &mut data);
            for _ in 0..rng.gen_range(3..=5) {
                let col = random_color(rng);
                let (cx, cy) = (rng.gen_range(0.0..s as f32), rng.gen_range(0.0..s as f32));
                let r = rng.gen_range(s as f32 / 10.0..s as f32 / 3.0);
                let circle = rng.gen_bool(0.5);
                for y in 0..s {
                    for x in 0..s {
                        let (fx, fy) = (x as f32 - cx, y as f32 - cy);
                        let inside = if circle {
                            fx * fx + fy * fy <= r * r
                        } else {
                            fx.abs() <= r && fy.abs() <= r * 0.6
                        };
                        if inside {
                            for c in 0..3 {
                                data[c * n + y * s + x] = col[c];
                            }
                        }
                    }
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(&[3, s, s], data).expect("valid procedural shape")
}

fn box_blur(plane: &mut [f32], s: usize, r: usize) {
    let src = plane.to_vec();
    let clampi = |i: isize| i.clamp(0, s as isize - 1) as usize;
    let mut tmp = vec![0.0f32; s * s];
    let k = (2 * r + 1) as f32;
    for y in 0..s {
        for x in 0..s {
            let sum: f32 = (-(r as isize)..=r as isize).map(|d| src[y * s + clampi(x as isize + d)]).sum();
            tmp[y * s + x] = sum / k;
        }
    }
    for y in 0..s {
        for x in 0..s {
            let sum: f32 = (-(r as isize)..=r as isize).map(|d| tmp[clampi(y as isize + d) * s + x]).sum();
            plane[y * s + x] = sum / k;
        }
    }
}

/// A corpus with its encoder taps computed once for a given encoder.
#[derive(Clone, Debug)]
pub struct PreparedCorpus {
    encoder: Arc<Encoder>,
    images: Vec<Tensor>,
    taps: Vec<EncoderTaps>,
}

impl PreparedCorpus {
    pub fn new(corpus: &Corpus, encoder: Arc<Encoder>) -> Result<Self> {
        let taps = corpus
            .images
            .par_iter()
            .map(|img| encoder.forward(img))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            encoder,
            images: corpus.images.clone(),
            taps,
        })
    }

    pub fn encoder(&self) -> &Arc<Encoder> {
        &self.encoder
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn taps(&self) -> &[EncoderTaps] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Trains the decoder of `graph` in place and returns the per-step mean batch
/// loss.
pub fn train_decoder(graph: &mut NetworkGraph, corpus: &Corpus, config: &TrainConfig) -> Result<Vec<f32>> {
    let prepared = PreparedCorpus::new(corpus, graph.encoder().clone())?;
    train_decoder_prepared(graph, &prepared, config)
}

pub fn train_decoder_prepared(
    graph: &mut NetworkGraph,
    corpus: &PreparedCorpus,
    config: &TrainConfig,
) -> Result<Vec<f32>> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("corpus is empty".into()));
    }
    if !Arc::ptr_eq(corpus.encoder(), graph.encoder()) && corpus.encoder() != graph.encoder() {
        return Err(Error::Precondition("corpus was prepared with a different encoder".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new(config.learning_rate);
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch);
        while batch.len() < config.batch {
            if order.is_empty() {
                order = (0..corpus.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled above"));
        }
        let results = batch
            .par_iter()
            .map(|&i| graph.reconstruction_grads(&corpus.taps[i], &corpus.images[i]))
            .collect::<Result<Vec<_>>>()?;
        let mut total = Gradients::default();
        let mut loss = 0.0f64;
        for (l, g) in &results {
            loss += l;
            total.add(g);
        }
        let loss = (loss / batch.len() as f64) as f32;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        total.scale(1.0 / batch.len() as f32);
        adam.step(graph, &total);
        trace.push(loss);
    }
    Ok(trace)
}

/// PSNR in dB of `a` against `b`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("psnr of {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean PSNR of the clamped reconstructions over the corpus.
pub fn reconstruction_psnr(graph: &NetworkGraph, corpus: &Corpus) -> Result<f64> {
    let values = corpus
        .images
        .par_iter()
        .map(|img| psnr(&graph.reconstruct(img)?, img))
        .collect::<Result<Vec<_>>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}
