use shm_nn::{sigmoid, softmax_channels, Tensor};

use super::fusion::fuse_tensor;
use super::{mnet_input, MNet, TNet, THead};
use crate::error::{Error, Result};
use crate::imaging::{resize, AlphaMatte, Image, Raster};
use crate::trimap::{ProbMode, TrimapProbs};

/// Longest edge the networks are run at; larger inputs are downscaled first.
pub const DEFAULT_SIZE_LIMIT: usize = 1500;

/// Working resolution for an `h x w` input under `limit`.
pub fn working_size(h: usize, w: usize, limit: usize) -> (usize, usize) {
    let longest = h.max(w);
    if longest <= limit {
        return (h, w);
    }
    let scale = limit as f64 / longest as f64;
    let fit = |v: usize| ((v as f64 * scale).round() as usize).clamp(1, limit);
    if h >= w {
        (limit, fit(w))
    } else {
        (fit(h), limit)
    }
}

pub fn image_tensor(img: &Image) -> Tensor<f32> {
    Tensor::from_vec([1, 3, img.height(), img.width()], img.data().to_vec()).expect("planar rgb")
}

fn matte_from_plane(h: usize, w: usize, plane: &[f32]) -> Result<AlphaMatte> {
    AlphaMatte::new(h, w, plane.iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Anything that maps an image to an alpha matte of the same size.
pub trait MattePredictor {
    fn name(&self) -> &str;

    /// Prediction at the image's own resolution.
    fn predict_native(&mut self, img: &Image) -> Result<AlphaMatte>;

    /// Prediction under the size limit: downscale, predict, rescale back.
    fn predict(&mut self, img: &Image, limit: usize) -> Result<AlphaMatte> {
        let (h, w) = img.dims();
        let (wh, ww) = working_size(h, w, limit);
        if (wh, ww) == (h, w) {
            return self.predict_native(img);
        }
        let small = resize(img, wh, ww)?;
        let alpha = self.predict_native(&small)?;
        resize(&alpha, h, w)
    }
}

/// Logits of the trimap network on one image.
pub fn tnet_forward(img: &Image, tnet: &mut TNet<f32>) -> Result<TrimapProbs> {
    if tnet.config().head != THead::Trimap {
        return Err(Error::InvalidArgument("network does not predict trimaps".into()));
    }
    let logits = tnet.forward(&image_tensor(img), false)?;
    TrimapProbs::from_tensor(&logits, 0, ProbMode::Logits)
}

/// Raw alpha of the matting network from an image and trimap probabilities.
pub fn mnet_forward(img: &Image, trimap: &TrimapProbs, mnet: &mut MNet<f32>) -> Result<AlphaMatte> {
    if img.dims() != trimap.dims() {
        return Err(Error::Shape(format!(
            "image {:?} and trimap {:?} differ in size",
            img.dims(),
            trimap.dims()
        )));
    }
    let x = mnet_input(&image_tensor(img), &trimap.to_tensor(), mnet.config().trimap_input)?;
    let y = mnet.forward(&x, false)?;
    matte_from_plane(img.height(), img.width(), y.plane(0, 0))
}

/// Intermediate results of one full forward pass.
#[derive(Debug, Clone)]
pub struct ShmOutput {
    pub probs: TrimapProbs,
    pub alpha_raw: AlphaMatte,
    pub alpha: AlphaMatte,
}

/// The full system: trimap network, matting network and fusion.
#[derive(Debug)]
pub struct ShmModel {
    pub tnet: TNet<f32>,
    pub mnet: MNet<f32>,
    /// When false the matting output is returned directly.
    pub fusion: bool,
}

impl ShmModel {
    pub fn new(tnet: TNet<f32>, mnet: MNet<f32>) -> Self {
        Self {
            tnet,
            mnet,
            fusion: true,
        }
    }

    pub fn run(&mut self, img: &Image) -> Result<ShmOutput> {
        let (h, w) = img.dims();
        let x = image_tensor(img);
        let logits = self.tnet.forward(&x, false)?;
        let probs = softmax_channels(&logits).map_err(|_| Error::NonFinite("tnet logits".into()))?;
        let input = mnet_input(&x, &probs, self.mnet.config().trimap_input)?;
        let raw = self.mnet.forward(&input, false)?;
        let alpha = if self.fusion { fuse_tensor(&probs, &raw)? } else { raw.clone() };
        Ok(ShmOutput {
            probs: TrimapProbs::new(h, w, ProbMode::Probabilities, renormalize(probs.sample(0)))?,
            alpha_raw: matte_from_plane(h, w, raw.plane(0, 0))?,
            alpha: matte_from_plane(h, w, alpha.plane(0, 0))?,
        })
    }
}

fn renormalize(data: &[f32]) -> Vec<f32> {
    let hw = data.len() / 3;
    let mut out = data.to_vec();
    for p in 0..hw {
        let s = data[p] + data[hw + p] + data[2 * hw + p];
        for c in 0..3 {
            out[c * hw + p] = data[c * hw + p] / s;
        }
    }
    out
}

impl MattePredictor for ShmModel {
    fn name(&self) -> &str {
        if self.fusion {
            "shm"
        } else {
            "shm-no-fusion"
        }
    }

    fn predict_native(&mut self, img: &Image) -> Result<AlphaMatte> {
        Ok(self.run(img)?.alpha)
    }
}

/// Downscale if needed, run the full system and rescale the fused matte back.
pub fn infer_full(img: &Image, model: &mut ShmModel, limit: usize) -> Result<AlphaMatte> {
    model.predict(img, limit)
}

/// Segmentation baseline: a hard foreground mask used as the matte.
#[derive(Debug)]
pub struct SegBaseline {
    pub net: TNet<f32>,
}

impl MattePredictor for SegBaseline {
    fn name(&self) -> &str {
        "seg"
    }

    fn predict_native(&mut self, img: &Image) -> Result<AlphaMatte> {
        if self.net.config().head != THead::Seg {
            return Err(Error::InvalidArgument("segmentation baseline needs a seg head".into()));
        }
        let logits = self.net.forward(&image_tensor(img), false)?;
        let (bg, fg) = (logits.plane(0, 0), logits.plane(0, 1));
        let data = bg.iter().zip(fg).map(|(b, f)| if f > b { 1.0 } else { 0.0 }).collect();
        AlphaMatte::new(img.height(), img.width(), data)
    }
}

/// Regression baseline: the segmentation backbone regressing alpha directly.
#[derive(Debug)]
pub struct RegBaseline {
    pub net: TNet<f32>,
}

impl MattePredictor for RegBaseline {
    fn name(&self) -> &str {
        "reg"
    }

    fn predict_native(&mut self, img: &Image) -> Result<AlphaMatte> {
        if self.net.config().head != THead::Reg {
            return Err(Error::InvalidArgument("regression baseline needs a reg head".into()));
        }
        let y = self.net.forward(&image_tensor(img), false)?;
        let data = y.plane(0, 0).iter().map(|&v| sigmoid(v)).collect();
        AlphaMatte::new(img.height(), img.width(), data)
    }
}
