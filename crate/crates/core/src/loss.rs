//! Alpha prediction, compositional and trimap classification objectives.

use serde::{Deserialize, Serialize};
use shm_nn::{cross_entropy, Scalar, Tensor};

use crate::error::{Error, Result};
use crate::imaging::{AlphaMatte, BinaryMask, Image, Raster};
use crate::trimap::{ProbMode, TrimapLabels, TrimapProbs};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Share of the alpha term in the prediction loss; the compositional term gets `1 - gamma`.
    pub gamma: f64,
    /// Weight of the trimap classification loss.
    pub lambda_t: f64,
    pub charbonnier_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            lambda_t: 0.01,
            charbonnier_eps: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("loss.gamma must be in [0, 1], got {}", self.gamma)));
        }
        if !(self.lambda_t >= 0.0) || !(self.charbonnier_eps >= 0.0) {
            return Err(Error::Config("loss.lambda_t and loss.charbonnier_eps must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub alpha_term: f64,
    pub comp_term: f64,
    pub trimap_term: f64,
    pub total: f64,
}

pub fn total_loss(alpha_term: f64, comp_term: f64, trimap_term: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        alpha_term,
        comp_term,
        trimap_term,
        total: w.gamma * alpha_term + (1.0 - w.gamma) * comp_term + w.lambda_t * trimap_term,
    }
}

#[inline]
fn charbonnier(d: f64, eps: f64) -> (f64, f64) {
    let r = (d * d + eps * eps).sqrt();
    let slope = if r > 0.0 { d / r } else { 0.0 };
    (r, slope)
}

/// Prediction terms over a batch together with the gradient of
/// `gamma * alpha_term + (1 - gamma) * comp_term` w.r.t. the predicted alpha.
#[derive(Debug, Clone)]
pub struct PredictionTerms<T> {
    pub alpha_term: f64,
    pub comp_term: f64,
    pub grad: Tensor<T>,
}

/// Batched prediction loss. `alpha_p`, `alpha_g` and `mask` are `[N,1,H,W]`,
/// `fg` and `bg` are `[N,3,H,W]`; pixels with a zero mask are ignored and the
/// means run over the masked pixels (and the three colour channels for the
/// compositional term).
pub fn prediction_terms<T: Scalar>(
    alpha_p: &Tensor<T>,
    alpha_g: &Tensor<T>,
    fg: &Tensor<T>,
    bg: &Tensor<T>,
    mask: Option<&Tensor<T>>,
    w: &LossWeights,
) -> Result<PredictionTerms<T>> {
    let [n, c, h, wd] = alpha_p.shape();
    let colour = [n, 3, h, wd];
    if c != 1 || alpha_g.shape() != alpha_p.shape() || fg.shape() != colour || bg.shape() != colour {
        return Err(Error::Shape(format!(
            "prediction loss shapes: alpha_p {:?}, alpha_g {:?}, fg {:?}, bg {:?}",
            alpha_p.shape(),
            alpha_g.shape(),
            fg.shape(),
            bg.shape()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != alpha_p.shape() {
            return Err(Error::Shape(format!("mask {:?} vs alpha {:?}", m.shape(), alpha_p.shape())));
        }
    }
    let eps = w.charbonnier_eps;
    let hw = h * wd;
    let mut count = 0usize;
    let (mut alpha_sum, mut comp_sum) = (0.0f64, 0.0f64);
    let mut slopes = vec![0.0f64; n * hw];
    for s in 0..n {
        let (ap, ag) = (alpha_p.plane(s, 0), alpha_g.plane(s, 0));
        let m = mask.map(|m| m.plane(s, 0));
        for p in 0..hw {
            if m.is_some_and(|m| m[p] == T::zero()) {
                continue;
            }
            count += 1;
            let d = ap[p].as_f64() - ag[p].as_f64();
            let (r, slope_a) = charbonnier(d, eps);
            alpha_sum += r;
            let mut slope_c = 0.0;
            for ch in 0..3 {
                let diff = fg.plane(s, ch)[p].as_f64() - bg.plane(s, ch)[p].as_f64();
                let (r, sl) = charbonnier(d * diff, eps);
                comp_sum += r;
                slope_c += sl * diff;
            }
            slopes[s * hw + p] = w.gamma * slope_a + (1.0 - w.gamma) * slope_c / 3.0;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("prediction loss over an empty region".into()));
    }
    let inv = 1.0 / count as f64;
    let grad = Tensor::from_vec(
        alpha_p.shape(),
        slopes.into_iter().map(|v| T::lit(v * inv)).collect(),
    )?;
    Ok(PredictionTerms {
        alpha_term: alpha_sum * inv,
        comp_term: comp_sum * inv / 3.0,
        grad,
    })
}

fn matte_tensor(a: &AlphaMatte) -> Tensor<f64> {
    Tensor::<f32>::from_vec([1, 1, a.height(), a.width()], a.data().to_vec())
        .expect("sized")
        .cast()
}

fn image_tensor(img: &Image) -> Tensor<f64> {
    Tensor::<f32>::from_vec([1, 3, img.height(), img.width()], img.data().to_vec())
        .expect("sized")
        .cast()
}

/// Alpha and compositional terms for one sample; `region` restricts the mean.
pub fn prediction_loss(
    alpha_p: &AlphaMatte,
    alpha_g: &AlphaMatte,
    fg: &Image,
    bg: &Image,
    weights: &LossWeights,
    region: Option<&BinaryMask>,
) -> Result<(f64, f64)> {
    let dims = alpha_p.dims();
    if alpha_g.dims() != dims || fg.dims() != dims || bg.dims() != dims {
        return Err(Error::Shape("prediction loss rasters differ in size".into()));
    }
    let mask = match region {
        Some(m) if (m.height(), m.width()) != dims => {
            return Err(Error::Shape("region mask differs in size".into()))
        }
        Some(m) => Some(
            Tensor::from_vec(
                [1, 1, dims.0, dims.1],
                m.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            )
            .expect("sized"),
        ),
        None => None,
    };
    let t = prediction_terms(
        &matte_tensor(alpha_p),
        &matte_tensor(alpha_g),
        &image_tensor(fg),
        &image_tensor(bg),
        mask.as_ref(),
        weights,
    )?;
    Ok((t.alpha_term, t.comp_term))
}

/// Class indices of a batch of label maps in `N x H x W` order.
pub fn stack_labels(labels: &[&TrimapLabels]) -> Vec<u8> {
    labels.iter().flat_map(|l| l.codes().iter().copied()).collect()
}

/// Mean cross entropy of `[N,K,H,W]` logits against class indices, with its gradient.
pub fn classification_terms<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<(f64, Tensor<T>)> {
    cross_entropy(logits, labels).map_err(|e| match e {
        shm_nn::NnError::NonFinite(what) => Error::NonFinite(what),
        other => Error::Nn(other),
    })
}

pub fn trimap_loss(logits: &TrimapProbs, labels: &TrimapLabels) -> Result<f64> {
    if logits.mode() != ProbMode::Logits {
        return Err(Error::InvalidArgument("trimap loss expects logits".into()));
    }
    if logits.dims() != labels.dims() {
        return Err(Error::Shape(format!(
            "logits {:?} vs labels {:?}",
            logits.dims(),
            labels.dims()
        )));
    }
    let t: Tensor<f64> = logits.to_tensor().cast();
    Ok(classification_terms(&t, labels.codes())?.0)
}
