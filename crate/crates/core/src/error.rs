//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/layer shape disagreement.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Inconsistent configuration (bad extents, out-of-range settings).
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse (e.g. backward on a node that is not on the tape).
    #[error("usage error: {0}")]
    Usage(String),

    /// Corrupt or foreign file contents.
    #[error("format error: {0}")]
    Format(String),

    /// Config-file parse failure with the offending line.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A required input artifact does not exist yet.
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    /// NaN/Inf encountered where finite values are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
