//! Crate-wide error type. Shape mismatches inside the tensor core are programmer
//! errors and panic with context instead; this enum covers conditions a caller
//! can plausibly hit with bad input, bad files, or a diverging optimization.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input data, reported with its 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An index (item id, step, …) fell outside its valid range.
    #[error("index out of range: {0}")]
    Index(String),

    /// A NaN or infinity escaped a numeric routine.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Checkpoint file malformed or of an unsupported version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
