use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shm_nn::{
    pad_reflect, pad_reflect_backward, prefix_names, Conv2d, MaxPool2d, MaxUnpool2d, Module, Param,
    PoolIndices, Scalar, Sigmoid, Tensor,
};

use super::block::{round_up, ConvBlock};
use crate::error::{Error, Result};

/// How the trimap is presented to the matting network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrimapInput {
    /// Image plus the three class probabilities (6 channels).
    Probabilities,
    /// Image plus a single `Fs + 0.5 Us` channel (4 channels).
    SingleChannel,
}

impl TrimapInput {
    pub fn channels(self) -> usize {
        match self {
            TrimapInput::Probabilities => 6,
            TrimapInput::SingleChannel => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MNetConfig {
    pub width_multiplier: f64,
    pub use_batchnorm: bool,
    pub trimap_input: TrimapInput,
    pub init_seed: u64,
}

impl Default for MNetConfig {
    fn default() -> Self {
        Self {
            width_multiplier: 0.125,
            use_batchnorm: true,
            trimap_input: TrimapInput::Probabilities,
            init_seed: 2,
        }
    }
}

/// Conv counts per encoder stage of the VGG16 layout.
const STAGE_CONVS: [usize; 5] = [2, 2, 3, 3, 3];
const STAGE_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
pub const MNET_STRIDE: usize = 16;

impl MNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::Config(format!(
                "mnet.width_multiplier must be in (0, 1], got {}",
                self.width_multiplier
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, width: usize) -> usize {
        ((width as f64 * self.width_multiplier).round() as usize).max(1)
    }

    /// Encoder channel widths after applying the multiplier.
    pub fn stage_widths(&self) -> [usize; 5] {
        STAGE_WIDTHS.map(|w| self.scaled(w))
    }
}

#[derive(Debug, Clone)]
struct MNetCache {
    input_shape: [usize; 4],
    padded_shape: [usize; 4],
}

/// Encoder-decoder matting network with index-based unpooling.
#[derive(Debug, Clone)]
pub struct MNet<T> {
    cfg: MNetConfig,
    encoder: Vec<Vec<ConvBlock<T>>>,
    pools: Vec<MaxPool2d>,
    decoder: Vec<ConvBlock<T>>,
    unpools: Vec<MaxUnpool2d>,
    predictor: Conv2d<T>,
    squash: Sigmoid<T>,
    cache: Option<MNetCache>,
}

impl<T: Scalar> MNet<T> {
    pub fn new(cfg: &MNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let bn = cfg.use_batchnorm;
        let widths = cfg.stage_widths();
        let mut in_ch = cfg.trimap_input.channels();
        let mut encoder = Vec::new();
        for (s, (&convs, &width)) in STAGE_CONVS.iter().zip(&widths).enumerate() {
            let mut stage = Vec::new();
            for k in 0..convs {
                let name = format!("conv{}_{}", s + 1, k + 1);
                stage.push(ConvBlock::new(&name, in_ch, width, 3, bn, &mut rng));
                in_ch = width;
            }
            encoder.push(stage);
        }
        // deconv5 keeps stage-5 width, each later block maps to the width of the stage it re-enters
        let plan = [
            ("deconv5", widths[4], widths[3]),
            ("deconv4", widths[3], widths[2]),
            ("deconv3", widths[2], widths[1]),
            ("deconv2", widths[1], widths[0]),
            ("deconv1", widths[0], widths[0]),
        ];
        let decoder = plan
            .iter()
            .map(|&(name, i, o)| ConvBlock::new(name, i, o, 3, bn, &mut rng))
            .collect();
        let mut predictor = Conv2d::new(widths[0], 1, 3, &mut rng);
        prefix_names(&mut predictor, "alpha_pred");
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            pools: (0..4).map(|_| MaxPool2d::new()).collect(),
            decoder,
            unpools: (0..4).map(|_| MaxUnpool2d::new()).collect(),
            predictor,
            squash: Sigmoid::new(),
            cache: None,
        })
    }

    pub fn config(&self) -> &MNetConfig {
        &self.cfg
    }

    /// Number of convolution layers (encoder, decoder, prediction).
    pub fn conv_layer_count(&self) -> (usize, usize) {
        let enc = self.encoder.iter().map(Vec::len).sum();
        (enc, self.decoder.len() + 1)
    }

    /// `[N,C,H,W]` input to `[N,1,H,W]` raw alpha in `[0,1]`.
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let expected = self.cfg.trimap_input.channels();
        if x.c() != expected {
            return Err(Error::Shape(format!(
                "mnet expects {expected} input channels, got {}",
                x.c()
            )));
        }
        let (ph, pw) = (round_up(x.h(), MNET_STRIDE), round_up(x.w(), MNET_STRIDE));
        let mut h = if (ph, pw) == (x.h(), x.w()) { x.clone() } else { pad_reflect(x, ph, pw) };
        let mut indices: Vec<PoolIndices> = Vec::with_capacity(4);
        for (s, stage) in self.encoder.iter_mut().enumerate() {
            for block in stage.iter_mut() {
                h = block.forward(&h, train);
            }
            if s < 4 {
                let (pooled, idx) = self.pools[s].forward(&h, train);
                indices.push(idx);
                h = pooled;
            }
        }
        for (d, block) in self.decoder.iter_mut().enumerate() {
            h = block.forward(&h, train);
            if d < 4 {
                let level = 3 - d;
                h = self.unpools[level].forward(&h, &indices[level], train);
            }
        }
        h = self.predictor.forward(&h, train);
        h = self.squash.forward(&h, train);
        let out = if (ph, pw) == (x.h(), x.w()) { h } else { h.crop(0, 0, x.h(), x.w())? };
        if !out.all_finite() {
            return Err(Error::NonFinite("mnet output".into()));
        }
        if train {
            self.cache = Some(MNetCache {
                input_shape: x.shape(),
                padded_shape: [x.n(), x.c(), ph, pw],
            });
        }
        Ok(out)
    }

    /// Backpropagate output gradients; returns the gradient w.r.t. the input.
    pub fn backward(&mut self, g: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("mnet backward without training forward");
        let [_, _, ph, pw] = cache.padded_shape;
        let mut g = if (g.h(), g.w()) == (ph, pw) { g.clone() } else { g.uncrop(0, 0, ph, pw) };
        g = self.squash.backward(&g);
        g = self.predictor.backward(&g);
        for (d, block) in self.decoder.iter_mut().enumerate().rev() {
            if d < 4 {
                g = self.unpools[3 - d].backward(&g);
            }
            g = block.backward(&g);
        }
        for (s, stage) in self.encoder.iter_mut().enumerate().rev() {
            if s < 4 {
                g = self.pools[s].backward(&g);
            }
            for block in stage.iter_mut().rev() {
                g = block.backward(&g);
            }
        }
        if cache.padded_shape == cache.input_shape {
            g
        } else {
            pad_reflect_backward(&g, cache.input_shape)
        }
    }
}

impl<T: Scalar> Module<T> for MNet<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in self.encoder.iter_mut().flatten() {
            b.visit_params(f);
        }
        for b in &mut self.decoder {
            b.visit_params(f);
        }
        self.predictor.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in self.encoder.iter_mut().flatten() {
            b.visit_buffers(f);
        }
        for b in &mut self.decoder {
            b.visit_buffers(f);
        }
    }
}
