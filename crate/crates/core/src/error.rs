use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GdrError>;

#[derive(Debug, Error)]
pub enum GdrError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("ragged input: row {row} has {found} columns, expected {expected}")]
    Ragged {
        row: usize,
        found: usize,
        expected: usize,
    },

    #[error("bad IDX magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { found: u32, expected: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("k = {k} must satisfy 1 <= k < n = {n}")]
    InvalidK { k: usize, n: usize },

    #[error("labels are required for this operation")]
    MissingLabels,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("unsupported embedding dimension {0} (this path is 2-D only)")]
    UnsupportedDimension(usize),

    #[error("affinity graph has no edges")]
    EmptyGraph,

    #[error("optimization diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("did not converge after {iterations} iterations: {what}")]
    NoConvergence { iterations: usize, what: String },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl GdrError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GdrError::Io {
            path: path.into(),
            source,
        }
    }
}
