use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("degenerate {channel} channel: min == max == {value}")]
    DegenerateChannel { channel: &'static str, value: f64 },

    #[error("length mismatch: {what} (expected {expected}, got {got})")]
    LengthMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: String, index: usize },

    #[error("invalid sample {id}: {reason}")]
    InvalidSample { id: String, reason: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("checkpoint fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint { expected: String, found: String },

    #[error("unknown sample id {0}")]
    UnknownSample(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("plot: {0}")]
    Plot(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
