//! Trimap network, matting network, fusion and checkpoints.

mod block;
pub mod checkpoint;
pub mod fusion;
pub mod infer;
mod mnet;
mod tnet;

use shm_nn::{Scalar, Tensor};

pub use checkpoint::{config_fingerprint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use fusion::{fuse, fuse_tensor, fuse_tensor_backward, FusionInputs};
pub use infer::{
    infer_full, mnet_forward, tnet_forward, MattePredictor, RegBaseline, SegBaseline, ShmModel,
    DEFAULT_SIZE_LIMIT,
};

pub use mnet::{MNet, MNetConfig, TrimapInput, MNET_STRIDE};
pub use tnet::{Backbone, THead, TNet, TNetConfig};

use crate::error::{Error, Result};
use crate::trimap::TrimapClass;

/// Matting network input: image channels followed by the trimap encoding.
pub fn mnet_input<T: Scalar>(img: &Tensor<T>, probs: &Tensor<T>, mode: TrimapInput) -> Result<Tensor<T>> {
    if probs.c() != 3 || img.c() != 3 {
        return Err(Error::Shape(format!(
            "expected 3-channel image and probabilities, got {} and {}",
            img.c(),
            probs.c()
        )));
    }
    let cat = match mode {
        TrimapInput::Probabilities => Tensor::concat_channels(&[img, probs])?,
        TrimapInput::SingleChannel => Tensor::concat_channels(&[img, &single_channel(probs)])?,
    };
    Ok(cat)
}

fn single_channel<T: Scalar>(probs: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros([probs.n(), 1, probs.h(), probs.w()]);
    for n in 0..probs.n() {
        let fs = probs.plane(n, TrimapClass::Foreground as usize);
        let us = probs.plane(n, TrimapClass::Unknown as usize);
        for ((o, &f), &u) in out.plane_mut(n, 0).iter_mut().zip(fs).zip(us) {
            *o = f + T::lit(0.5) * u;
        }
    }
    out
}

/// Gradient w.r.t. the trimap probabilities given the gradient of [`mnet_input`].
pub fn mnet_input_backward<T: Scalar>(grad: &Tensor<T>, mode: TrimapInput) -> Result<Tensor<T>> {
    let parts = grad.split_channels(&[3, grad.c() - 3])?;
    match mode {
        TrimapInput::Probabilities => Ok(parts[1].clone()),
        TrimapInput::SingleChannel => {
            let g = &parts[1];
            let mut out = Tensor::zeros([g.n(), 3, g.h(), g.w()]);
            for n in 0..g.n() {
                let src = g.plane(n, 0).to_vec();
                out.plane_mut(n, TrimapClass::Foreground as usize).copy_from_slice(&src);
                for (o, s) in out.plane_mut(n, TrimapClass::Unknown as usize).iter_mut().zip(&src) {
                    *o = T::lit(0.5) * *s;
                }
            }
            Ok(out)
        }
    }
}
