use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SIZE_MULTIPLE;
use crate::error::{Error, Result};
use crate::nn::{conv_forward, conv_macs, maxpool2, relu, ConvLayer};
use crate::tensor::Tensor;

pub const STAGES: usize = 5;

/// Fixed VGG-style encoder. Stage `k` starts with the conv whose ReLU output
/// is the `ReLU_k_1` tap; stages 1–4 end in a 2×2 max pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    base_width: usize,
    stages: Vec<Vec<ConvLayer>>,
}

/// The five `ReLU_k_1` feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderTaps(pub Vec<Tensor>);

impl EncoderTaps {
    pub fn get(&self, stage: usize) -> &Tensor {
        &self.0[stage - 1]
    }
}

impl Encoder {
    /// Channel width of each tap.
    pub fn widths(base_width: usize) -> [usize; STAGES] {
        let b = base_width;
        [b, 2 * b, 4 * b, 8 * b, 8 * b]
    }

    /// One conv per stage with paired-sign random filters: output channel
    /// `2j + 1` is the negation of channel `2j`, so the ReLU keeps both signs
    /// of every random projection.
    pub fn seeded(base_width: usize, seed: u64) -> Result<Self> {
        if base_width < 2 {
            return Err(Error::Precondition(format!("base width must be >= 2, got {base_width}")));
        }
        let widths = Self::widths(base_width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x656e_636f_6465_72);
        let mut c_in = 3;
        let mut stages = Vec::with_capacity(STAGES);
        for &c_out in &widths {
            let bound = (3.0 / (9.0 * c_in as f32)).sqrt();
            let mut weight = Tensor::zeros(&[c_out, c_in, 3, 3]);
            let per_out = c_in * 9;
            for pair in 0..c_out / 2 {
                for k in 0..per_out {
                    let v = rng.gen_range(-bound..bound);
                    weight.data_mut()[2 * pair * per_out + k] = v;
                    weight.data_mut()[(2 * pair + 1) * per_out + k] = -v;
                }
            }
            if c_out % 2 == 1 {
                for k in 0..per_out {
                    weight.data_mut()[(c_out - 1) * per_out + k] = rng.gen_range(-bound..bound);
                }
            }
            stages.push(vec![ConvLayer::new(weight, Tensor::zeros(&[c_out]))?]);
            c_in = c_out;
        }
        Ok(Self { base_width, stages })
    }

    /// Builds an encoder from `enc.stage{k}.conv{j}.{weight,bias}` tensors.
    /// Each stage may hold several convs (VGG-19 has 2, 2, 4, 4 before each
    /// pool); only `conv1` of each stage is required.
    pub fn from_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut stages = Vec::with_capacity(STAGES);
        let mut c_in = 3;
        for k in 1..=STAGES {
            let mut convs = Vec::new();
            for j in 1.. {
                let wname = format!("enc.stage{k}.conv{j}.weight");
                let bname = format!("enc.stage{k}.conv{j}.bias");
                let (Some(w), Some(b)) = (tensors.get(&wname), tensors.get(&bname)) else {
                    if j == 1 {
                        return Err(Error::Input(format!("missing encoder tensor {wname}")));
                    }
                    break;
                };
                let layer = ConvLayer::new(w.clone(), b.clone())?;
                if layer.in_channels() != c_in {
                    return Err(Error::dim(format!(
                        "{wname}: expected {c_in} input channels, got {}",
                        layer.in_channels()
                    )));
                }
                c_in = layer.out_channels();
                convs.push(layer);
            }
            stages.push(convs);
        }
        let tap_widths: Vec<usize> = stages.iter().map(|s| s[0].out_channels()).collect();
        let base_width = tap_widths[0];
        if tap_widths != Self::widths(base_width) {
            return Err(Error::dim(format!(
                "encoder tap widths {tap_widths:?} do not follow the (1,2,4,8,8) x base pattern"
            )));
        }
        Ok(Self { base_width, stages })
    }

    pub fn base_width(&self) -> usize {
        self.base_width
    }

    pub fn tap_widths(&self) -> [usize; STAGES] {
        Self::widths(self.base_width)
    }

    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, stage) in self.stages.iter().enumerate() {
            for (j, conv) in stage.iter().enumerate() {
                out.insert(format!("enc.stage{}.conv{}.weight", k + 1, j + 1), conv.weight.clone());
                out.insert(format!("enc.stage{}.conv{}.bias", k + 1, j + 1), conv.bias.clone());
            }
        }
        out
    }

    pub fn check_image(image: &Tensor) -> Result<(usize, usize)> {
        let (c, h, w) = image.chw()?;
        if c != 3 {
            return Err(Error::Input(format!("expected an RGB image, got {c} channels")));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::Input(format!(
                "image is {w}x{h}; height and width must be multiples of {SIZE_MULTIPLE}"
            )));
        }
        Ok((h, w))
    }

    pub fn forward(&self, image: &Tensor) -> Result<EncoderTaps> {
        Self::check_image(image)?;
        let mut x = image.clone();
        let mut taps = Vec::with_capacity(STAGES);
        for (k, stage) in self.stages.iter().enumerate() {
            for (j, conv) in stage.iter().enumerate() {
                x = relu(&conv_forward(conv, &x)?);
                if j == 0 {
                    taps.push(x.clone());
                }
            }
            if k + 1 < STAGES {
                x = maxpool2(&x)?.pooled;
            }
        }
        Ok(EncoderTaps(taps))
    }

    /// Conv multiply-accumulates for one image of size `h × w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let mut total = 0;
        let (mut h, mut w) = (h, w);
        for (k, stage) in self.stages.iter().enumerate() {
            for conv in stage {
                total += conv_macs(conv.in_channels(), conv.out_channels(), h, w);
            }
            if k + 1 < STAGES {
                h /= 2;
                w /= 2;
            }
        }
        total
    }
}
