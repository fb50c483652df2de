//! Automatic human matting.
//!
//! A segmentation network predicts a three-class trimap (foreground,
//! background, unknown), a matting network refines alpha inside the unknown
//! band, and a probabilistic fusion `alpha = P(fg) + P(unknown) * alpha_raw`
//! joins them so the whole system trains end to end.

pub mod error;
pub mod imaging;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod synthdata;
pub mod train;
pub mod trimap;

pub use error::{Error, Result};
