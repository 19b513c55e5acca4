use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that cannot be combined by the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value, configuration or dataset that violates a contract.
    #[error("validation error: {0}")]
    Validation(String),

    /// An operation was called out of order (e.g. backward without a train-mode forward).
    #[error("state error: {0}")]
    State(String),

    /// Malformed IDX file.
    #[error("{path}: {kind} at byte offset {offset}")]
    Idx {
        path: PathBuf,
        offset: u64,
        kind: IdxErrorKind,
    },

    /// Malformed network/training config text.
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    /// Malformed or incompatible model file.
    #[error("model file: {0}")]
    Model(#[from] ModelFileError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdxErrorKind {
    #[error("bad magic number: expected {expected}, found {found}")]
    BadMagic { expected: u32, found: u32 },
    #[error("file truncated: needed {needed} more bytes, {available} available")]
    Truncated { needed: u64, available: u64 },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label value {0} outside 0..=9")]
    BadLabel(u8),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelFileError {
    #[error("bad magic bytes {0:?}, expected \"BNET\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("payload is {found} bytes but the network needs {expected}")]
    PayloadLength { expected: u64, found: u64 },
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("embedded network description is invalid: {0}")]
    Spec(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
