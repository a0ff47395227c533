//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A configuration value is internally inconsistent or unsupported.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A metric is undefined for the given input (e.g. single-class AUROC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Dataset layout validation failed.
    #[error("dataset index error: {0}")]
    Index(String),

    /// Checkpoint or weights file could not be read or is malformed.
    #[error("load error: {0}")]
    Load(String),

    /// Training diverged; carries a diagnostic dump.
    #[error("non-finite loss at step {step} (k={k}, seed={seed}): {detail}")]
    NonFiniteLoss {
        step: u64,
        k: usize,
        seed: u64,
        detail: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
