use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::encoder::{Encoder, EncoderTaps, STAGES};
use super::{ArchCode, SlotKind, NUM_SLOTS};
use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, conv_backward_impl, conv_forward, conv_macs, instance_norm,
    instance_norm_backward, relu, relu_backward, resize_nearest, split_channels,
    upsample_nearest, upsample_nearest_backward, ConvLayer,
};
use crate::tensor::Tensor;
use crate::transfer::{transfer_with, StyleStatistics, TransferConfig};

/// Where a transfer module runs. Levels count from 1 (full resolution) to 4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Bottleneck,
    Skip(usize),
    Stage(usize),
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Bottleneck => f.write_str("bottleneck"),
            Site::Skip(l) => write!(f, "insl{l}"),
            Site::Stage(l) => write!(f, "dec{l}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SkipPlan {
    pub norm: bool,
    pub transfer: bool,
}

/// A code decoded into the decoder's structure. Arrays are indexed by
/// `level - 1` (or `stage - 1` for `bfa`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderPlan {
    pub bfa: [bool; 4],
    pub bottleneck_transfer: bool,
    pub bottleneck_norm: bool,
    pub skips: [Option<SkipPlan>; 4],
    pub stage_transfer: [bool; 4],
    pub aux1: [bool; 4],
    pub aux2: [bool; 4],
    pub refine: bool,
}

impl DecoderPlan {
    pub fn decode(code: ArchCode) -> Self {
        let mut plan = DecoderPlan {
            bfa: [false; 4],
            bottleneck_transfer: false,
            bottleneck_norm: false,
            skips: [None; 4],
            stage_transfer: [false; 4],
            aux1: [false; 4],
            aux2: [false; 4],
            refine: false,
        };
        for slot in 0..NUM_SLOTS {
            if !code.get(slot) {
                continue;
            }
            match SlotKind::of(slot) {
                SlotKind::Bfa(k) => plan.bfa[k - 1] = true,
                SlotKind::BottleneckTransfer => plan.bottleneck_transfer = true,
                SlotKind::Skip(l) => {
                    plan.skips[l - 1] = Some(SkipPlan {
                        norm: code.get(8 + l),
                        transfer: code.get(12 + l),
                    })
                }
                // Handled with their parent skip link.
                SlotKind::SkipNorm(_) | SlotKind::SkipTransfer(_) => {}
                SlotKind::StageTransfer(l) => plan.stage_transfer[l - 1] = true,
                SlotKind::AuxConv1(l) => plan.aux1[l - 1] = true,
                SlotKind::AuxConv2(l) => plan.aux2[l - 1] = true,
                SlotKind::BottleneckNorm => plan.bottleneck_norm = true,
                SlotKind::Refine => plan.refine = true,
            }
        }
        plan
    }

    /// Transfer sites in execution order.
    pub fn transfer_sites(&self) -> Vec<Site> {
        let mut sites = Vec::new();
        if self.bottleneck_transfer {
            sites.push(Site::Bottleneck);
        }
        for level in (1..=4).rev() {
            if matches!(self.skips[level - 1], Some(SkipPlan { transfer: true, .. })) {
                sites.push(Site::Skip(level));
            }
            if self.stage_transfer[level - 1] {
                sites.push(Site::Stage(level));
            }
        }
        sites
    }

    /// Every executed operator, by name. The minimal decoder contributes
    /// `dec{l}.conv`, `dec{l}.upsample` and `out`.
    pub fn op_names(&self) -> BTreeSet<String> {
        let mut ops = BTreeSet::new();
        for k in 1..=4 {
            if self.bfa[k - 1] {
                ops.insert(format!("bfa.stage{k}"));
                ops.insert("bfa.fuse".to_string());
            }
        }
        if self.bottleneck_norm {
            ops.insert("bottleneck.norm".into());
        }
        if self.bottleneck_transfer {
            ops.insert("bottleneck.transfer".into());
        }
        for l in 1..=4 {
            ops.insert(format!("dec{l}.conv"));
            ops.insert(format!("dec{l}.upsample"));
            if let Some(skip) = self.skips[l - 1] {
                ops.insert(format!("insl{l}"));
                ops.insert(format!("dec{l}.merge"));
                if skip.norm {
                    ops.insert(format!("insl{l}.norm"));
                }
                if skip.transfer {
                    ops.insert(format!("insl{l}.transfer"));
                }
            }
            if self.aux1[l - 1] {
                ops.insert(format!("dec{l}.aux1"));
            }
            if self.aux2[l - 1] {
                ops.insert(format!("dec{l}.aux2"));
            }
            if self.stage_transfer[l - 1] {
                ops.insert(format!("dec{l}.transfer"));
            }
        }
        if self.refine {
            ops.insert("refine".into());
        }
        ops.insert("out".into());
        ops
    }
}

/// Per-layer parameter gradients keyed by layer name.
#[derive(Clone, Debug, Default)]
pub struct Gradients(pub BTreeMap<String, (Tensor, Tensor)>);

impl Gradients {
    pub fn add(&mut self, other: &Gradients) {
        for (name, (gw, gb)) in &other.0 {
            match self.0.get_mut(name) {
                Some((w, b)) => {
                    w.data_mut().iter_mut().zip(gw.data()).for_each(|(a, v)| *a += v);
                    b.data_mut().iter_mut().zip(gb.data()).for_each(|(a, v)| *a += v);
                }
                None => {
                    self.0.insert(name.clone(), (gw.clone(), gb.clone()));
                }
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for (w, b) in self.0.values_mut() {
            w.data_mut().iter_mut().for_each(|v| *v *= s);
            b.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Cached style statistics for every transfer site of one graph.
#[derive(Clone, Debug)]
pub struct StyleCache {
    sites: Vec<(Site, StyleStatistics)>,
}

impl StyleCache {
    pub fn get(&self, site: Site) -> Option<&StyleStatistics> {
        self.sites.iter().find(|(s, _)| *s == site).map(|(_, st)| st)
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    /// Convolution multiply-accumulates.
    pub conv: u64,
    /// Multiply-accumulates of the feature transfers, excluding the iterative
    /// eigensolver.
    pub transfer: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.conv + self.transfer
    }
}

enum Step {
    Conv { name: String, input: Tensor, live: bool },
    Relu { pre: Tensor },
    Upsample,
    Norm { input: Tensor },
    KeepFirst { channels: usize, rest: usize },
}

type SiteHook<'a> = &'a mut dyn FnMut(Site, Tensor) -> Result<Tensor>;

/// An executable auto-encoder: the shared fixed encoder plus a decoder
/// decoded from an [`ArchCode`].
#[derive(Clone, Debug)]
pub struct NetworkGraph {
    code: ArchCode,
    plan: DecoderPlan,
    encoder: Arc<Encoder>,
    decoder: BTreeMap<String, ConvLayer>,
}

/// Builds a graph around a freshly seeded encoder.
pub fn build_graph(code: ArchCode, base_width: usize, seed: u64) -> Result<NetworkGraph> {
    let encoder = Arc::new(Encoder::seeded(base_width, seed)?);
    Ok(NetworkGraph::new(code, encoder, seed))
}

fn stream_id(name: &str) -> u64 {
    // FNV-1a; stable across platforms and toolchains.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl NetworkGraph {
    /// Decoder layers are initialized from `seed` and the layer name only, so
    /// a layer starts identical in every architecture that contains it with
    /// the same shape.
    pub fn new(code: ArchCode, encoder: Arc<Encoder>, seed: u64) -> Self {
        let plan = DecoderPlan::decode(code);
        let mut decoder = BTreeMap::new();
        for (name, c_in, c_out) in Self::layer_shapes(&plan, encoder.tap_widths()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_id(&name));
            let mut layer = ConvLayer::random(c_in, c_out, &mut rng);
            if name == "dec.out" {
                let bound = (1.0 / (9.0 * c_in as f32)).sqrt();
                layer.weight.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
                layer.bias.data_mut().fill(0.5);
            }
            decoder.insert(name, layer);
        }
        Self {
            code,
            plan,
            encoder,
            decoder,
        }
    }

    fn layer_shapes(plan: &DecoderPlan, widths: [usize; STAGES]) -> Vec<(String, usize, usize)> {
        let mut layers = Vec::new();
        if plan.bfa.iter().any(|&b| b) {
            let extra: usize = (0..4).filter(|&k| plan.bfa[k]).map(|k| widths[k]).sum();
            layers.push(("dec.bfa.fuse".to_string(), widths[4] + extra, widths[4]));
        }
        for level in (1..=4).rev() {
            let c = widths[level - 1];
            layers.push((format!("dec.stage{level}.conv"), widths[level], c));
            if plan.skips[level - 1].is_some() {
                layers.push((format!("dec.stage{level}.merge"), 2 * c, c));
            }
            if plan.aux1[level - 1] {
                layers.push((format!("dec.stage{level}.aux1"), c, c));
            }
            if plan.aux2[level - 1] {
                layers.push((format!("dec.stage{level}.aux2"), c, c));
            }
        }
        if plan.refine {
            layers.push(("dec.refine".to_string(), widths[0], widths[0]));
        }
        layers.push(("dec.out".to_string(), widths[0], 3));
        layers
    }

    pub fn code(&self) -> ArchCode {
        self.code
    }

    pub fn plan(&self) -> &DecoderPlan {
        &self.plan
    }

    pub fn encoder(&self) -> &Arc<Encoder> {
        &self.encoder
    }

    pub fn base_width(&self) -> usize {
        self.encoder.base_width()
    }

    pub fn transfer_sites(&self) -> Vec<Site> {
        self.plan.transfer_sites()
    }

    pub fn decoder_layers(&self) -> &BTreeMap<String, ConvLayer> {
        &self.decoder
    }

    pub fn decoder_layers_mut(&mut self) -> &mut BTreeMap<String, ConvLayer> {
        &mut self.decoder
    }

    /// All encoder and decoder parameters as `{layer}.weight` / `{layer}.bias`.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = self.encoder.named_tensors();
        out.extend(self.decoder_tensors());
        out
    }

    pub fn decoder_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, layer) in &self.decoder {
            out.insert(format!("{name}.weight"), layer.weight.clone());
            out.insert(format!("{name}.bias"), layer.bias.clone());
        }
        out
    }

    /// Replaces decoder weights (and the encoder, if `enc.*` tensors are
    /// present) from a tensor map. Every decoder layer of this architecture
    /// must be present with a matching shape.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        if tensors.keys().any(|k| k.starts_with("enc.")) {
            let encoder = Encoder::from_tensors(tensors)?;
            if encoder.base_width() != self.encoder.base_width() {
                return Err(Error::dim(format!(
                    "weights have base width {}, graph has {}",
                    encoder.base_width(),
                    self.encoder.base_width()
                )));
            }
            self.encoder = Arc::new(encoder);
        }
        for (name, layer) in self.decoder.iter_mut() {
            let w = tensors
                .get(&format!("{name}.weight"))
                .ok_or_else(|| Error::Input(format!("missing tensor {name}.weight")))?;
            let b = tensors
                .get(&format!("{name}.bias"))
                .ok_or_else(|| Error::Input(format!("missing tensor {name}.bias")))?;
            if w.shape() != layer.weight.shape() || b.shape() != layer.bias.shape() {
                return Err(Error::dim(format!(
                    "{name}: expected weight {:?}, got {:?}",
                    layer.weight.shape(),
                    w.shape()
                )));
            }
            *layer = ConvLayer::new(w.clone(), b.clone())?;
        }
        Ok(())
    }

    fn layer(&self, name: &str) -> &ConvLayer {
        &self.decoder[name]
    }

    fn conv_relu(
        &self,
        name: String,
        x: Tensor,
        live: &mut bool,
        tape: &mut Option<&mut Vec<Step>>,
    ) -> Result<Tensor> {
        let pre = conv_forward(self.layer(&name), &x)?;
        let out = relu(&pre);
        if let Some(t) = tape.as_deref_mut() {
            t.push(Step::Conv { name, input: x, live: *live });
            t.push(Step::Relu { pre });
        }
        *live = true;
        Ok(out)
    }

    /// Runs the decoder on encoder taps and returns the raw (unclamped)
    /// image. `hook` runs at every transfer site; without one the sites are
    /// skipped.
    fn decode(
        &self,
        taps: &EncoderTaps,
        mut hook: Option<SiteHook<'_>>,
        mut tape: Option<&mut Vec<Step>>,
    ) -> Result<Tensor> {
        let p = &self.plan;
        let mut live = false;
        let mut site = |s: Site, x: Tensor| -> Result<Tensor> {
            match hook.as_mut() {
                Some(h) => h(s, x),
                None => Ok(x),
            }
        };

        let r5 = taps.get(5);
        let (_, bh, bw) = r5.chw()?;
        let mut h = if p.bfa.iter().any(|&b| b) {
            let mut parts = vec![r5.clone()];
            for k in 1..=4 {
                if p.bfa[k - 1] {
                    parts.push(resize_nearest(taps.get(k), bh, bw)?);
                }
            }
            let refs: Vec<&Tensor> = parts.iter().collect();
            let agg = concat_channels(&refs)?;
            self.conv_relu("dec.bfa.fuse".into(), agg, &mut live, &mut tape)?
        } else {
            r5.clone()
        };
        if p.bottleneck_norm {
            let out = instance_norm(&h)?;
            if live {
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Step::Norm { input: h });
                }
            }
            h = out;
        }
        if p.bottleneck_transfer {
            h = site(Site::Bottleneck, h)?;
        }

        for level in (1..=4).rev() {
            h = self.conv_relu(format!("dec.stage{level}.conv"), h, &mut live, &mut tape)?;
            h = upsample_nearest(&h)?;
            if let Some(t) = tape.as_deref_mut() {
                t.push(Step::Upsample);
            }
            if let Some(skip) = p.skips[level - 1] {
                let mut s = taps.get(level).clone();
                if skip.norm {
                    s = instance_norm(&s)?;
                }
                if skip.transfer {
                    s = site(Site::Skip(level), s)?;
                }
                let channels = h.chw()?.0;
                let rest = s.chw()?.0;
                let merged = concat_channels(&[&h, &s])?;
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Step::KeepFirst { channels, rest });
                }
                h = self.conv_relu(format!("dec.stage{level}.merge"), merged, &mut live, &mut tape)?;
            }
            if p.aux1[level - 1] {
                h = self.conv_relu(format!("dec.stage{level}.aux1"), h, &mut live, &mut tape)?;
            }
            if p.aux2[level - 1] {
                h = self.conv_relu(format!("dec.stage{level}.aux2"), h, &mut live, &mut tape)?;
            }
            if p.stage_transfer[level - 1] {
                h = site(Site::Stage(level), h)?;
            }
        }
        if p.refine {
            h = self.conv_relu("dec.refine".into(), h, &mut live, &mut tape)?;
        }
        let out = conv_forward(self.layer("dec.out"), &h)?;
        if let Some(t) = tape.as_deref_mut() {
            t.push(Step::Conv {
                name: "dec.out".into(),
                input: h,
                live,
            });
        }
        Ok(out)
    }

    /// Raw decoder output with every transfer site disabled.
    pub fn reconstruct_raw(&self, taps: &EncoderTaps) -> Result<Tensor> {
        self.decode(taps, None, None)
    }

    /// Reconstruction of `image` clamped to `[0, 1]`.
    pub fn reconstruct(&self, image: &Tensor) -> Result<Tensor> {
        let taps = self.encoder.forward(image)?;
        Ok(clamp01(self.reconstruct_raw(&taps)?))
    }

    /// Runs the style image through the network (transfers off) and records
    /// the style statistics at every transfer site.
    pub fn style_cache(&self, style: &Tensor) -> Result<StyleCache> {
        let mut sites = Vec::new();
        if self.plan.transfer_sites().is_empty() {
            return Ok(StyleCache { sites });
        }
        let taps = self.encoder.forward(style)?;
        let mut collect = |s: Site, x: Tensor| -> Result<Tensor> {
            sites.push((s, StyleStatistics::from_features(&x)?));
            Ok(x)
        };
        self.decode(&taps, Some(&mut collect), None)?;
        Ok(StyleCache { sites })
    }

    /// Stylizes pre-encoded content with cached style statistics. Output is
    /// clamped to `[0, 1]`.
    pub fn stylize(&self, content: &EncoderTaps, style: &StyleCache, config: &TransferConfig) -> Result<Tensor> {
        config.validate()?;
        if config.blend == 0.0 || style.is_empty() {
            return Ok(clamp01(self.reconstruct_raw(content)?));
        }
        let mut apply = |s: Site, x: Tensor| -> Result<Tensor> {
            let stats = style
                .get(s)
                .ok_or_else(|| Error::Input(format!("style cache has no statistics for site {s}")))?;
            transfer_with(&x, stats, config)
        };
        Ok(clamp01(self.decode(content, Some(&mut apply), None)?))
    }

    /// Content photo + style photo → stylized photo in `[0, 1]`.
    pub fn forward(&self, content: &Tensor, style: &Tensor, config: &TransferConfig) -> Result<Tensor> {
        config.validate()?;
        Encoder::check_image(style)?;
        let taps = self.encoder.forward(content)?;
        let cache = if config.blend == 0.0 {
            StyleCache { sites: Vec::new() }
        } else {
            self.style_cache(style)?
        };
        self.stylize(&taps, &cache, config)
    }

    /// Mean squared error of the unclamped reconstruction against `target`
    /// and its gradient with respect to every decoder parameter.
    pub fn reconstruction_grads(&self, taps: &EncoderTaps, target: &Tensor) -> Result<(f64, Gradients)> {
        let mut tape = Vec::new();
        let out = self.decode(taps, None, Some(&mut tape))?;
        if out.shape() != target.shape() {
            return Err(Error::dim(format!(
                "reconstruction {:?} vs target {:?}",
                out.shape(),
                target.shape()
            )));
        }
        let n = out.numel() as f64;
        let mut loss = 0.0f64;
        let grad_data: Vec<f32> = out
            .data()
            .iter()
            .zip(target.data())
            .map(|(&o, &t)| {
                let d = o as f64 - t as f64;
                loss += d * d;
                (2.0 * d / n) as f32
            })
            .collect();
        loss /= n;
        let mut grad = Tensor::new(out.shape(), grad_data)?;
        let mut grads = Gradients::default();
        while let Some(step) = tape.pop() {
            match step {
                Step::Conv { name, input, live } => {
                    let g = conv_backward_impl(self.layer(&name), &input, &grad, live)?;
                    grads.0.insert(name, (g.grad_w, g.grad_b));
                    match g.grad_x {
                        Some(gx) => grad = gx,
                        None => break,
                    }
                }
                Step::Relu { pre } => grad = relu_backward(&pre, &grad)?,
                Step::Upsample => grad = upsample_nearest_backward(&grad)?,
                Step::Norm { input } => grad = instance_norm_backward(&input, &grad)?,
                Step::KeepFirst { channels, rest } => {
                    grad = split_channels(&grad, &[channels, rest])?.swap_remove(0);
                }
            }
        }
        Ok((loss, grads))
    }

    /// Analytic multiply-accumulate count of one stylization at `h × w`.
    pub fn count_flops(&self, h: usize, w: usize) -> FlopCount {
        let widths = self.encoder.tap_widths();
        let level_dims = |l: usize| (h >> (l - 1), w >> (l - 1));
        let mut decoder = 0u64;
        let (bh, bw) = level_dims(5);
        for (name, layer) in &self.decoder {
            let (ci, co) = (layer.in_channels(), layer.out_channels());
            let (lh, lw) = if name == "dec.bfa.fuse" {
                (bh, bw)
            } else if let Some(rest) = name.strip_prefix("dec.stage") {
                let level: usize = rest[..1].parse().expect("stage digit");
                if rest.ends_with(".conv") {
                    level_dims(level + 1)
                } else {
                    level_dims(level)
                }
            } else {
                (h, w)
            };
            decoder += conv_macs(ci, co, lh, lw);
        }
        let mut conv = self.encoder.macs(h, w) + decoder;
        let sites = self.plan.transfer_sites();
        let mut transfer = 0u64;
        if !sites.is_empty() {
            // The style image takes the same path.
            conv *= 2;
            for s in sites {
                let (c, n) = match s {
                    Site::Bottleneck => (widths[4], bh * bw),
                    Site::Skip(l) | Site::Stage(l) => {
                        let (lh, lw) = level_dims(l);
                        (widths[l - 1], lh * lw)
                    }
                };
                let (c, n) = (c as u64, n as u64);
                // Two covariances, the combined transform, and its application.
                transfer += 2 * c * c * n + 2 * c * c * c + c * c * n;
            }
        }
        FlopCount { conv, transfer }
    }
}

pub(crate) fn clamp01(mut x: Tensor) -> Tensor {
    x.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    x
}
