//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error enum.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation received an array whose shape does not match its contract.
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// A non-finite value (NaN or infinity) was rejected.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A token id fell outside the vocabulary, or a token string is unknown.
    #[error("unknown token: {0}")]
    UnknownToken(String),

    /// An evaluation set contained no instances.
    #[error("empty evaluation set")]
    EmptyEvalSet,

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Training or optimization produced a NaN objective.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A corpus file line could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A checkpoint file is malformed, truncated, or from another version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Word pools are too small for the requested corpus.
    #[error("pool exhausted: {0}")]
    PoolExhausted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
