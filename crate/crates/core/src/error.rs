use thiserror::Error;

/// Errors raised across the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("degenerate reference direction")]
    DegenerateReference,

    #[error("invalid shard layout: {0}")]
    InvalidLayout(String),

    #[error("index out of range: {what} = {index} (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty group")]
    EmptyGroup,

    #[error("ratio overflow for context {context}, action {action}")]
    RatioOverflow { context: usize, action: usize },

    #[error("divergence: non-finite parameters after update at version {version}")]
    Divergence { version: u64 },

    #[error("behavior version {version} unavailable (store holds {oldest}..={newest})")]
    SnapshotMiss { version: u64, oldest: u64, newest: u64 },

    #[error("learner step {step} precedes staleness {staleness} without warmup clamp")]
    StalenessUnderflow { step: u64, staleness: u64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Bad input (config, arguments, data) rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Parse { .. } | Error::InsufficientData(_) | Error::InvalidLayout(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
