use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shm_nn::{
    adaptive_avg_pool, adaptive_avg_pool_backward, pad_reflect, pad_reflect_backward, prefix_names,
    resize_bilinear, resize_bilinear_backward, Conv2d, MaxPool2d, Module, Param, Scalar, Tensor,
};

use super::block::{round_up, ConvBlock};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Encoder, then one upsample + conv stage per pooling stage.
    SmallEncdec,
    /// Encoder, pyramid pooling head at the bottleneck, classifier, bilinear upsample.
    PyramidPool,
}

/// What the segmentation network is trained to output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum THead {
    /// 3-class trimap logits (foreground, background, unknown).
    Trimap,
    /// 2-class hard segmentation logits (background, foreground).
    Seg,
    /// Single channel regressed alpha (pre-sigmoid).
    Reg,
}

impl THead {
    pub fn channels(self) -> usize {
        match self {
            THead::Trimap => 3,
            THead::Seg => 2,
            THead::Reg => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TNetConfig {
    pub backbone: Backbone,
    pub base_channels: usize,
    pub depth: usize,
    pub use_batchnorm: bool,
    pub head: THead,
    pub init_seed: u64,
}

impl Default for TNetConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::PyramidPool,
            base_channels: 8,
            depth: 3,
            use_batchnorm: true,
            head: THead::Trimap,
            init_seed: 1,
        }
    }
}

impl TNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("tnet.base_channels must be positive".into()));
        }
        if !(1..=6).contains(&self.depth) {
            return Err(Error::Config(format!("tnet.depth must be in 1..=6, got {}", self.depth)));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        1 << self.depth
    }
}

const PYRAMID_BINS: [usize; 4] = [1, 2, 3, 6];

#[derive(Debug, Clone)]
struct PyramidHead<T> {
    branches: Vec<ConvBlock<T>>,
    fuse: ConvBlock<T>,
    branch_channels: usize,
    cache: Option<[usize; 4]>,
}

impl<T: Scalar> PyramidHead<T> {
    fn new(channels: usize, batchnorm: bool, rng: &mut ChaCha8Rng) -> Self {
        let branch_channels = (channels / 4).max(1);
        let branches = PYRAMID_BINS
            .iter()
            .map(|b| ConvBlock::new(&format!("ppm{b}"), channels, branch_channels, 1, batchnorm, rng))
            .collect();
        let fused_in = channels + PYRAMID_BINS.len() * branch_channels;
        Self {
            branches,
            fuse: ConvBlock::new("ppm_fuse", fused_in, channels, 3, batchnorm, rng),
            branch_channels,
            cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let (h, w) = (x.h(), x.w());
        let mut parts = vec![x.clone()];
        for (branch, &bins) in self.branches.iter_mut().zip(&PYRAMID_BINS) {
            let pooled = adaptive_avg_pool(x, bins);
            let y = branch.forward(&pooled, train);
            parts.push(resize_bilinear(&y, h, w));
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let cat = Tensor::concat_channels(&refs).expect("pyramid parts share spatial size");
        if train {
            self.cache = Some(x.shape());
        }
        self.fuse.forward(&cat, train)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Tensor<T> {
        let in_shape = self.cache.take().expect("pyramid backward without training forward");
        let gcat = self.fuse.backward(g);
        let mut counts = vec![in_shape[1]];
        counts.extend(std::iter::repeat_n(self.branch_channels, PYRAMID_BINS.len()));
        let mut parts = gcat.split_channels(&counts).expect("split matches concat").into_iter();
        let mut gx = parts.next().expect("identity part");
        for ((branch, &bins), gu) in self.branches.iter_mut().zip(&PYRAMID_BINS).zip(parts) {
            let gy = resize_bilinear_backward(&gu, [in_shape[0], self.branch_channels, bins, bins]);
            let gp = branch.backward(&gy);
            gx.add_assign(&adaptive_avg_pool_backward(&gp, in_shape));
        }
        gx
    }
}

impl<T: Scalar> Module<T> for PyramidHead<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in &mut self.branches {
            b.visit_params(f);
        }
        self.fuse.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in &mut self.branches {
            b.visit_buffers(f);
        }
        self.fuse.visit_buffers(f);
    }
}

#[derive(Debug, Clone)]
struct TNetCache {
    input_shape: [usize; 4],
    padded_shape: [usize; 4],
    stage_shapes: Vec<[usize; 4]>,
    head_shape: [usize; 4],
}

/// Semantic segmentation network producing full-resolution logits.
#[derive(Debug, Clone)]
pub struct TNet<T> {
    cfg: TNetConfig,
    encoder: Vec<ConvBlock<T>>,
    pools: Vec<MaxPool2d>,
    bottleneck: ConvBlock<T>,
    pyramid: Option<PyramidHead<T>>,
    decoder: Vec<ConvBlock<T>>,
    classifier: Conv2d<T>,
    cache: Option<TNetCache>,
}

impl<T: Scalar> TNet<T> {
    pub fn new(cfg: &TNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let bn = cfg.use_batchnorm;
        let ch = |i: usize| cfg.base_channels << i;
        let mut encoder = Vec::new();
        let mut in_ch = 3;
        for i in 0..cfg.depth {
            encoder.push(ConvBlock::new(&format!("enc{i}_a"), in_ch, ch(i), 3, bn, &mut rng));
            encoder.push(ConvBlock::new(&format!("enc{i}_b"), ch(i), ch(i), 3, bn, &mut rng));
            in_ch = ch(i);
        }
        let top = ch(cfg.depth);
        let bottleneck = ConvBlock::new("bottleneck", in_ch, top, 3, bn, &mut rng);
        let (pyramid, decoder, cls_in) = match cfg.backbone {
            Backbone::PyramidPool => (Some(PyramidHead::new(top, bn, &mut rng)), Vec::new(), top),
            Backbone::SmallEncdec => {
                let decoder = (0..cfg.depth)
                    .rev()
                    .map(|i| ConvBlock::new(&format!("dec{i}"), ch(i + 1), ch(i), 3, bn, &mut rng))
                    .collect();
                (None, decoder, ch(0))
            }
        };
        let mut classifier = Conv2d::new(cls_in, cfg.head.channels(), 1, &mut rng);
        prefix_names(&mut classifier, "classifier");
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            pools: (0..cfg.depth).map(|_| MaxPool2d::new()).collect(),
            bottleneck,
            pyramid,
            decoder,
            classifier,
            cache: None,
        })
    }

    pub fn config(&self) -> &TNetConfig {
        &self.cfg
    }

    /// `[N,3,H,W]` image batch to `[N,K,H,W]` logits; any `H, W` are accepted.
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        if x.c() != 3 {
            return Err(Error::Shape(format!("tnet expects 3 input channels, got {}", x.c())));
        }
        let stride = self.cfg.stride();
        let (ph, pw) = (round_up(x.h(), stride), round_up(x.w(), stride));
        let padded = if (ph, pw) == (x.h(), x.w()) { x.clone() } else { pad_reflect(x, ph, pw) };
        let mut h = padded;
        let mut stage_shapes = Vec::new();
        for (i, pool) in self.pools.iter_mut().enumerate() {
            h = self.encoder[2 * i].forward(&h, train);
            h = self.encoder[2 * i + 1].forward(&h, train);
            stage_shapes.push(h.shape());
            h = pool.forward(&h, train).0;
        }
        h = self.bottleneck.forward(&h, train);
        if let Some(p) = self.pyramid.as_mut() {
            h = p.forward(&h, train);
        }
        for (dec, shape) in self.decoder.iter_mut().zip(stage_shapes.iter().rev()) {
            h = resize_bilinear(&h, shape[2], shape[3]);
            h = dec.forward(&h, train);
        }
        h = self.classifier.forward(&h, train);
        let head_shape = h.shape();
        if (h.h(), h.w()) != (ph, pw) {
            h = resize_bilinear(&h, ph, pw);
        }
        let out = if (ph, pw) == (x.h(), x.w()) { h } else { h.crop(0, 0, x.h(), x.w())? };
        if !out.all_finite() {
            return Err(Error::NonFinite("tnet logits".into()));
        }
        if train {
            self.cache = Some(TNetCache {
                input_shape: x.shape(),
                padded_shape: [x.n(), 3, ph, pw],
                stage_shapes,
                head_shape,
            });
        }
        Ok(out)
    }

    /// Backpropagate logit gradients; returns the gradient w.r.t. the input image.
    pub fn backward(&mut self, g: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("tnet backward without training forward");
        let [_, _, ph, pw] = cache.padded_shape;
        let mut g = if (g.h(), g.w()) == (ph, pw) { g.clone() } else { g.uncrop(0, 0, ph, pw) };
        if (cache.head_shape[2], cache.head_shape[3]) != (ph, pw) {
            g = resize_bilinear_backward(&g, cache.head_shape);
        }
        g = self.classifier.backward(&g);
        for (dec, shape) in self.decoder.iter_mut().rev().zip(&cache.stage_shapes) {
            g = dec.backward(&g);
            let below = [g.n(), g.c(), shape[2] / 2, shape[3] / 2];
            g = resize_bilinear_backward(&g, below);
        }
        if let Some(p) = self.pyramid.as_mut() {
            g = p.backward(&g);
        }
        g = self.bottleneck.backward(&g);
        for (i, pool) in self.pools.iter_mut().enumerate().rev() {
            g = pool.backward(&g);
            g = self.encoder[2 * i + 1].backward(&g);
            g = self.encoder[2 * i].backward(&g);
        }
        if cache.padded_shape == cache.input_shape {
            g
        } else {
            pad_reflect_backward(&g, cache.input_shape)
        }
    }
}

impl<T: Scalar> Module<T> for TNet<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in &mut self.encoder {
            b.visit_params(f);
        }
        self.bottleneck.visit_params(f);
        if let Some(p) = self.pyramid.as_mut() {
            p.visit_params(f);
        }
        for b in &mut self.decoder {
            b.visit_params(f);
        }
        self.classifier.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in &mut self.encoder {
            b.visit_buffers(f);
        }
        self.bottleneck.visit_buffers(f);
        if let Some(p) = self.pyramid.as_mut() {
            p.visit_buffers(f);
        }
        for b in &mut self.decoder {
            b.visit_buffers(f);
        }
    }
}
