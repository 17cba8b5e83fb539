use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CatxError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CatxError {
    #[error("failed to read {path}: {source}")]
    Ingestion {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path} was written with format version {found}, expected {expected}; re-run with --force to rebuild it")]
    Migration { path: PathBuf, found: u32, expected: u32 },

    #[error("cell {0} is locked by another run")]
    Locked(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl CatxError {
    pub fn config(msg: impl Into<String>) -> Self {
        CatxError::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        CatxError::Shape(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        CatxError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
