use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Config(#[from] ConfigError),

    /// A model version needed for a drift distance was pruned or never stored.
    /// This is a simulator bug, never a recoverable condition.
    #[error("invariant violated: global model version {0} is not in the version history")]
    MissingVersion(u64),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("bad magic number in {file}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        file: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("truncated {file} file: need {needed} bytes, have {available}")]
    Truncated {
        file: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("image count {images} does not match label count {labels}")]
    LengthMismatch { images: usize, labels: usize },

    #[error("label {label} at index {index} is out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: u8,
        classes: usize,
    },
}

#[derive(Debug, Error)]
pub enum ConfigError {
    /// Syntax or schema error; the message carries the line and column.
    #[error("config parse error: {0}")]
    Parse(String),

    #[error("invalid config field `{field}`: {reason}")]
    Validation { field: &'static str, reason: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
