//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shape or dimension mismatch between operands.
    Dimension(String),
    /// Invalid configuration (bad hyperparameters, divisibility violations, ...).
    Config(String),
    /// Index out of range (token id, task index, ...).
    Index(String),
    /// Unknown task name.
    Task(String),
    /// Sequence exceeds the model's position budget.
    Sequence(String),
    /// A NaN or infinity was produced by a numeric operation.
    NonFinite(String),
    /// Checkpoint is malformed or does not match the requested model.
    Checkpoint(String),
    /// Training aborted (for example on a NaN loss).
    Training(String),
    /// Filesystem or serialization failure (stringified to keep Error cloneable).
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Task(m) => write!(f, "task error: {m}"),
            Error::Sequence(m) => write!(f, "sequence error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Error::Training(m) => write!(f, "training error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        // serde_json errors carry line/column; keep them in the message.
        Error::Io(format!("json at line {} column {}: {e}", e.line(), e.column()))
    }
}
