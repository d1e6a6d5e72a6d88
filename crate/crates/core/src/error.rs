use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: non-positive input {value} at coordinate {index}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("non-finite value in {op} at coordinate {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("insufficient batch: need at least {needed} rows, got {got}")]
    InsufficientBatch { needed: usize, got: usize },

    #[error("matrix is not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input validation: {0}")]
    Input(String),

    #[error("dataset insufficient: {0}")]
    DatasetInsufficient(String),

    #[error("mining stalled: {0}")]
    MiningStalled(String),

    #[error("non-finite loss at step {step}; last good checkpoint kept")]
    NonFiniteLoss { step: u64 },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("unsupported checkpoint version {found} (reader supports {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),

    #[error("parse error in {path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    #[error("empty class: {0}")]
    EmptyClass(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
