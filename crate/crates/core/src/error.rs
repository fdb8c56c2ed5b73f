use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward already ran on this graph; build a fresh graph")]
    BackwardTwice,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid search space: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("data error: {0}")]
    Data(#[from] DataError),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("candidate {index}: no path to the head after {retries} retries")]
    RetryBudgetExhausted { index: usize, retries: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Dataset ingestion failures, each kept distinct so callers can report them precisely.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("label {label} overflows {classes} classes (example {index})")]
    LabelOverflow {
        label: usize,
        classes: usize,
        index: usize,
    },

    #[error("row {row}: {message}")]
    BadRow { row: usize, message: String },

    #[error("empty dataset")]
    Empty,

    #[error("split {0} would be empty")]
    EmptySplit(&'static str),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
