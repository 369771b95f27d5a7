use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor kernels, model assembly, file formats and the
/// training/evaluation pipelines.
#[derive(Debug, Error)]
pub enum Error {
    /// A kernel received tensors whose dimensions do not line up; the
    /// message names the offending axes.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A structural constraint was violated (group divisibility, invalid
    /// hyperparameter, unsupported size).
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad input data: malformed archives, empty datasets, degenerate
    /// normalization constants.
    #[error("data error: {0}")]
    Data(String),

    /// A binary file could not be decoded; `offset` is the byte position
    /// where decoding failed.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Mis-sequenced API usage (e.g. a backward call without its context).
    #[error("usage error: {0}")]
    Usage(String),

    /// A NaN or Inf surfaced where finite values are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
