use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("unknown token id {0}")]
    UnknownId(u32),

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("not enough records: need {needed}, have {available}")]
    NotEnoughRecords { needed: usize, available: usize },

    #[error("record {index} has no property annotation")]
    MissingProperty { index: usize },

    #[error("objective count mismatch: expected {expected}, got {got}")]
    ObjectiveMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Adds location context to numeric failures, leaves other variants untouched.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::NumericFailure(msg) => Error::NumericFailure(format!("{ctx}: {msg}")),
            other => other,
        }
    }
}
