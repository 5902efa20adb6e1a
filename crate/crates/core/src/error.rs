use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("glyph store is empty: {0}")]
    EmptyStore(PathBuf),

    #[error("failed to ingest {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("checkpoint field `{field}`: {reason}")]
    Checkpoint { field: String, reason: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
