use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or missing key in a text header or config file.
    #[error("parse error at {key}: {detail}")]
    Parse { key: String, detail: String },

    #[error("{path}: expected {expected} bytes of voxel data, found {actual}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    /// Row numbers are 1-based data rows (the header is not counted).
    #[error("row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("duplicate nodule_id {0:?}")]
    Duplicate(String),

    #[error("rating {0} outside 1..=5")]
    RatingOutOfRange(i64),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("corrupt or incompatible file: {0}")]
    Format(String),

    /// Training produced a NaN/inf; names the first offending tensor.
    #[error("non-finite values in tensor {tensor}")]
    NonFinite { tensor: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            key: key.into(),
            detail: detail.into(),
        }
    }
}
