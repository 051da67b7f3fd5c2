//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Everything that can go wrong in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward target must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape corruption: {0}")]
    TapeCorruption(String),

    #[error("degenerate vector: l2 norm {norm:e} is below the {min:e} guard")]
    DegenerateVector { norm: f64, min: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("{what} out of range: {value}")]
    OutOfRange { what: &'static str, value: f64 },

    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("weight averaging has no snapshots to install")]
    NoSnapshots,

    #[error("unknown sample id {0}")]
    UnknownSample(usize),

    #[error("no correctness history yet for sample {0}")]
    EmptyHistory(usize),

    #[error("dataset format error: {0}")]
    DataFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

impl Error {
    /// Build an I/O error carrying the offending path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn invalid_config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig { field: field.into(), reason: reason.into() }
    }

    /// Process exit code for the CLI: 1 validation, 2 divergence, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence(_) | Error::NonFinite(_) => 2,
            Error::Io { .. } | Error::Parse { .. } | Error::DataFormat(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
