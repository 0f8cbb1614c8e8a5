//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the adaptation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite value in layer `{layer}`")]
    NonFinite { layer: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing layer `{0}` in checkpoint")]
    MissingLayer(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}; policy state: {policy}")]
    NanLoss {
        epoch: usize,
        batch: usize,
        policy: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("image codec error: {0}")]
    Codec(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
