use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch { expected: [usize; 3], actual: [usize; 3] },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty support: {0}")]
    EmptySupport(String),

    #[error("non-finite loss in term `{term}`")]
    NonFiniteLoss { term: String },

    #[error("optimization diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("classification error: {0}")]
    Classification(String),

    #[error(transparent)]
    Nifti(#[from] NiftiError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// NIfTI-1 reader/writer failures. Each malformed-file condition has its own variant.
#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("bad magic {0:?}: not a NIfTI file")]
    BadMagic([u8; 4]),

    #[error("unsupported NIfTI variant with magic {0:?} (only single-file NIfTI-1 `n+1` is supported)")]
    UnsupportedFormat(String),

    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("truncated file: expected at least {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("invalid header: {0}")]
    InvalidHeader(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
