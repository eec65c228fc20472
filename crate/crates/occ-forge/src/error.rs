//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by occ-forge operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or configuration value violates its invariant.
    #[error("invalid config: {0}")]
    Config(String),

    /// Input data is malformed or inconsistent (shape mismatch, bad labels, ...).
    #[error("invalid data: {0}")]
    Data(String),

    /// Two operands have incompatible dimensions.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Error::DimMismatch(msg.into())
    }
}
