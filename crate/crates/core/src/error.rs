use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic number {found:#x} (expected {expected:#x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("invalid class {label} (K = {classes})")]
    InvalidClass { label: usize, classes: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::BadMagic { .. } => "bad_magic",
            Error::Truncated { .. } => "truncated",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::Format(_) => "format",
            Error::Shape { .. } => "shape",
            Error::Precondition(_) => "precondition",
            Error::NonFinite(_) => "non_finite",
            Error::Calibration(_) => "calibration",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::InvalidClass { .. } => "invalid_class",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
