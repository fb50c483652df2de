//! Minimal CPU tensor and layer library for the matting networks.
//!
//! Every layer exposes `forward(x, train)` and `backward(grad)`; a training
//! forward caches what the matching backward needs. Layers are generic over
//! [`Scalar`] so the same code runs in `f32` for training and `f64` for
//! finite-difference checks.

mod activation;
pub mod archive;
mod batchnorm;
mod conv;
pub mod gradcheck;
mod optim;
mod param;
mod pool;
mod resize;
mod scalar;
mod softmax;
mod tensor;

pub use activation::{sigmoid, Relu, Sigmoid};
pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use optim::Adam;
pub use param::{prefix_names, Module, Param};
pub use pool::{adaptive_avg_pool, adaptive_avg_pool_backward, MaxPool2d, MaxUnpool2d, PoolIndices};
pub use resize::{
    bilinear_plane, bilinear_plane_adjoint, pad_reflect, pad_reflect_backward, reflect_index,
    resize_bilinear, resize_bilinear_backward,
};
pub use scalar::Scalar;
pub use softmax::{cross_entropy, softmax_channels, softmax_channels_backward};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("archive error: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
