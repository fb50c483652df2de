use std::path::PathBuf;

use shm_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("insufficient unique backgrounds: {required} required, {available} available")]
    InsufficientBackgrounds { required: usize, available: usize },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config fingerprint mismatch: {0}")]
    Fingerprint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step} in stage {stage}: {detail}")]
    Divergence {
        stage: String,
        step: u64,
        detail: String,
    },
    #[error("image codec error for {path}: {message}")]
    Codec { path: PathBuf, message: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
