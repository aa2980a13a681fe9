//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any lucid operation.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image dimensions do not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A degradation or model parameter violates its declared range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A stateful component was used out of order (empty history, stale index, ...).
    #[error("state error: {0}")]
    State(String),

    /// A corpus, manifest or dataset problem.
    #[error("corpus error: {0}")]
    Corpus(String),

    /// Checkpoint serialization/validation failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Configuration file or flag problem.
    #[error("config error: {0}")]
    Config(String),

    /// A numeric guard tripped (NaN loss, discriminator output out of (0,1), ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
}
