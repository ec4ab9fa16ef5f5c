use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LvaeError {
    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{what}: {rows}x{cols} exceeds the dense limit of {cap}")]
    DenseCap {
        what: &'static str,
        rows: usize,
        cols: usize,
        cap: usize,
    },

    #[error("{what} is not positive definite (jitter escalated to {jitter:e})")]
    NotPositiveDefinite { what: &'static str, jitter: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid batch: {0}")]
    Batch(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LvaeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LvaeError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, LvaeError>;
