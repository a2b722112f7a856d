use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("standard error is zero; the z statistic is undefined")]
    ZeroStandardError,

    #[error(
        "need at least 2 correct and 2 wrong records, got {correct} correct and {wrong} wrong"
    )]
    InsufficientClasses { correct: usize, wrong: usize },

    #[error("record {id}: missing {what}")]
    MissingMap { id: String, what: &'static str },

    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dangling reference {reference}: {reason}")]
    DanglingReference { reference: String, reason: String },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::ZeroStandardError | Error::NonFiniteLoss { .. } | Error::NonFinite(_)
        )
    }
}
