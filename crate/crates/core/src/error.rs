use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{which} covariance could not be factorized: {source}")]
    Factorization {
        which: &'static str,
        source: TensorError,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Precondition(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated {section}: need {needed} bytes, {available} available")]
    Truncated {
        section: String,
        needed: usize,
        available: usize,
    },
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("non-finite loss at epoch {epoch}, step {step}\n{dump}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        dump: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn precondition(msg: impl Into<String>) -> Error {
    Error::Precondition(msg.into())
}
