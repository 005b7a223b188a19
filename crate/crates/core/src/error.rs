use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // The cause is part of the message rather than a chained source, so
    // reports that print the chain do not repeat it.
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("record {id:?}: unknown label {label:?} (expected \"hate\" or \"non-hate\")")]
    UnknownLabel { id: String, label: String },

    #[error("duplicate instance id {0:?}")]
    DuplicateId(String),

    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),

    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),

    #[error("instance {0:?} has no tokens")]
    EmptyInstance(String),

    #[error("invalid gradient request: {0}")]
    InvalidRequest(String),

    #[error("non-finite {what} in batch {batch}")]
    NonFiniteLoss { what: &'static str, batch: usize },

    #[error("non-finite attribution score at position {position} of instance {id:?}")]
    NonFiniteAttribution { id: String, position: usize },

    #[error("integrated gradients needs at least one step")]
    ZeroSteps,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint vocabulary hash {found} does not match vocabulary {expected}")]
    VocabularyMismatch { expected: String, found: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), cause: source }
    }
}
