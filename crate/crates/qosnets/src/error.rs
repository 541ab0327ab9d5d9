//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by any part of the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed multiplier file {path}: {reason}")]
    AmFormat { path: PathBuf, reason: String },

    #[error("duplicate multiplier name `{0}`")]
    DuplicateAm(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("model is not calibrated; run calibration first")]
    NotCalibrated,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("malformed IDX file {path}: {reason}")]
    Idx { path: PathBuf, reason: String },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("bad plan file: {0}")]
    Plan(String),

    #[error("bad config: {0}")]
    Config(String),

    #[error("malformed results CSV at line {line}: {reason}")]
    Csv { line: usize, reason: String },
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
