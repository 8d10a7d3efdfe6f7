//! Crate-wide error and result types.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input: invariants violated at construction or call time.
    #[error("validation error: {0}")]
    Validation(String),

    /// Shapes or lengths do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An exact enumeration or exact solve exceeds its size limits.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// A binary or tabular input does not match its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// Too few usable points remain for a fit or estimate.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn capacity(msg: impl Into<String>) -> Self {
        Error::Capacity(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
