use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum ActError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("config mismatch on `{field}`: expected {expected}, found {found}")]
    ConfigMismatch {
        field: String,
        expected: String,
        found: String,
    },

    #[error("checksum mismatch: {0}")]
    Checksum(String),

    #[error("unsupported weight file version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("malformed weight file: {0}")]
    Format(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

pub type Result<T, E = ActError> = std::result::Result<T, E>;

impl ActError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        ActError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ActError::Io {
            path: path.into(),
            source,
        }
    }
}
