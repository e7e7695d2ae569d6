use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence of {len} tokens exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("invalid token sequence: {0}")]
    Sequence(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parameter corruption: {0}")]
    Corruption(String),
    #[error("numerical abort at step {step}: {reason}")]
    Numerical { step: usize, reason: String },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
