use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Messages are part of the command-line contract: the CLI prints them
/// verbatim, and scripts grep for phrases such as `corrupt checkpoint`.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty sample")]
    EmptySample,

    #[error("non-finite value {value} in {context}")]
    NonFinite { context: String, value: f64 },

    #[error("significance level {0} is outside the allowed range")]
    InvalidAlpha(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not a checkpoint: {0}")]
    NotACheckpoint(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("duplicate tensor {0:?}")]
    DuplicateTensor(String),

    #[error("invalid tensor {name:?}: {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("tensor not found: {0:?}")]
    TensorNotFound(String),

    #[error("tensor {name:?} is not a matrix (rank {rank})")]
    NotAMatrix { name: String, rank: usize },

    #[error("shape mismatch for {name:?}: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("token id {id} at position {position} is out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange {
        id: u64,
        position: usize,
        vocab_size: usize,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("no rows in {0}")]
    NoRows(String),

    #[error("bisection did not converge after {0} iterations")]
    NoConvergence(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
