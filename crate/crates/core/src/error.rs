use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("corrupted header in {}: {reason}", .path.display())]
    CorruptedHeader { path: PathBuf, reason: String },

    #[error("corrupted payload in {}: {reason}", .path.display())]
    CorruptedPayload { path: PathBuf, reason: String },

    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("identity network is not pretrained")]
    IdentityNetNotReady,

    #[error("parameter isolation violated: {0}")]
    Isolation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("plot error: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn non_finite(term: impl Into<String>) -> Self {
        Error::NonFinite { term: term.into() }
    }

    /// True for errors that stem from bad user input rather than a runtime
    /// failure during a computation.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::NonFinite { .. } | Error::Isolation(_) | Error::Tensor(_) | Error::Plot(_))
    }
}
