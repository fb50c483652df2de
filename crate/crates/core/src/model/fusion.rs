use shm_nn::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::imaging::{AlphaMatte, Raster};
use crate::trimap::{ProbMode, TrimapClass, TrimapProbs};

const FG: usize = TrimapClass::Foreground as usize;
const UNK: usize = TrimapClass::Unknown as usize;

/// Trimap probabilities together with the raw matting output they are fused with.
#[derive(Debug, Clone)]
pub struct FusionInputs {
    probs: TrimapProbs,
    alpha_raw: AlphaMatte,
}

impl FusionInputs {
    pub fn new(probs: TrimapProbs, alpha_raw: AlphaMatte) -> Result<Self> {
        if probs.mode() != ProbMode::Probabilities {
            return Err(Error::InvalidArgument("fusion needs probabilities, not logits".into()));
        }
        if probs.dims() != alpha_raw.dims() {
            return Err(Error::Shape(format!(
                "trimap {:?} and raw alpha {:?} differ in size",
                probs.dims(),
                alpha_raw.dims()
            )));
        }
        Ok(Self { probs, alpha_raw })
    }

    pub fn probs(&self) -> &TrimapProbs {
        &self.probs
    }

    pub fn alpha_raw(&self) -> &AlphaMatte {
        &self.alpha_raw
    }
}

/// `alpha_p = Fs + Us * alpha_r` for one pixel.
#[inline]
pub fn fuse_pixel(fs: f64, us: f64, alpha_r: f64) -> f64 {
    fs + us * alpha_r
}

/// The conditional form `(1 - Us) * Fs / (Fs + Bs) + Us * alpha_r`, undefined when `Fs + Bs = 0`.
#[inline]
pub fn fuse_pixel_conditional(fs: f64, bs: f64, us: f64, alpha_r: f64) -> f64 {
    (1.0 - us) * fs / (fs + bs) + us * alpha_r
}

pub fn fuse(inputs: &FusionInputs) -> AlphaMatte {
    let fs = inputs.probs.channel(TrimapClass::Foreground);
    let us = inputs.probs.channel(TrimapClass::Unknown);
    let data = fs
        .iter()
        .zip(us)
        .zip(inputs.alpha_raw.data())
        .map(|((&f, &u), &a)| (f + u * a).clamp(0.0, 1.0))
        .collect();
    let (h, w) = inputs.alpha_raw.dims();
    AlphaMatte::new(h, w, data).expect("fused values are clamped into range")
}

/// Batched fusion: `probs` is `[N,3,H,W]` (FG, BG, UNK), `alpha_raw` is `[N,1,H,W]`.
pub fn fuse_tensor<T: Scalar>(probs: &Tensor<T>, alpha_raw: &Tensor<T>) -> Result<Tensor<T>> {
    check_shapes(probs, alpha_raw)?;
    let mut out = Tensor::zeros(alpha_raw.shape());
    for n in 0..probs.n() {
        let (fs, us) = (probs.plane(n, FG), probs.plane(n, UNK));
        let ar = alpha_raw.plane(n, 0);
        for (((o, &f), &u), &a) in out.plane_mut(n, 0).iter_mut().zip(fs).zip(us).zip(ar) {
            *o = f + u * a;
        }
    }
    Ok(out)
}

/// Gradients of [`fuse_tensor`] w.r.t. the probabilities and the raw alpha.
pub fn fuse_tensor_backward<T: Scalar>(
    probs: &Tensor<T>,
    alpha_raw: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_shapes(probs, alpha_raw)?;
    if grad.shape() != alpha_raw.shape() {
        return Err(Error::Shape(format!(
            "fusion gradient {:?} vs output {:?}",
            grad.shape(),
            alpha_raw.shape()
        )));
    }
    let mut gp = Tensor::zeros(probs.shape());
    let mut ga = Tensor::zeros(alpha_raw.shape());
    for n in 0..probs.n() {
        let g = grad.plane(n, 0);
        gp.plane_mut(n, FG).copy_from_slice(g);
        let us = probs.plane(n, UNK);
        let ar = alpha_raw.plane(n, 0);
        for ((d, &gi), &a) in gp.plane_mut(n, UNK).iter_mut().zip(g).zip(ar) {
            *d = gi * a;
        }
        for ((d, &gi), &u) in ga.plane_mut(n, 0).iter_mut().zip(g).zip(us) {
            *d = gi * u;
        }
    }
    Ok((gp, ga))
}

fn check_shapes<T: Scalar>(probs: &Tensor<T>, alpha_raw: &Tensor<T>) -> Result<()> {
    let [n, c, h, w] = probs.shape();
    if c != 3 || alpha_raw.shape() != [n, 1, h, w] {
        return Err(Error::Shape(format!(
            "fusion needs [N,3,H,W] probabilities and [N,1,H,W] alpha, got {:?} and {:?}",
            probs.shape(),
            alpha_raw.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        assert!((fuse_pixel(0.3, 0.5, 0.8) - 0.7).abs() < 1e-12);
        assert!((fuse_pixel_conditional(0.3, 0.2, 0.5, 0.8) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn limit_cases_are_exact() {
        assert_eq!(fuse_pixel(0.25, 0.0, 0.9), 0.25);
        assert_eq!(fuse_pixel(0.0, 1.0, 0.37), 0.37);
    }

    #[test]
    fn domain_fusion_rejects_logits_and_size_mismatch() {
        let logits = TrimapProbs::new(1, 1, ProbMode::Logits, vec![0.0; 3]).unwrap();
        let a = AlphaMatte::filled(1, 1, 0.5).unwrap();
        assert!(FusionInputs::new(logits, a.clone()).is_err());
        let probs = TrimapProbs::new(1, 2, ProbMode::Probabilities, vec![0.5, 0.5, 0.5, 0.5, 0.0, 0.0])
            .unwrap();
        assert!(FusionInputs::new(probs, a).is_err());
    }

    #[test]
    fn tensor_and_domain_paths_agree() {
        let probs = TrimapProbs::new(1, 2, ProbMode::Probabilities, vec![0.3, 0.0, 0.2, 0.0, 0.5, 1.0])
            .unwrap();
        let ar = AlphaMatte::new(1, 2, vec![0.8, 0.4]).unwrap();
        let inputs = FusionInputs::new(probs.clone(), ar.clone()).unwrap();
        let domain = fuse(&inputs);
        let ar_t = Tensor::from_vec([1, 1, 1, 2], ar.data().to_vec()).unwrap();
        let t = fuse_tensor(&probs.to_tensor(), &ar_t).unwrap();
        for (a, b) in domain.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((domain.data()[1] - 0.4).abs() < 1e-6);
    }
}
