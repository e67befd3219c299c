use thiserror::Error;

/// Errors raised by the cache, model and harness layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("sequencing error: expected block {expected}, got {got}")]
    Sequencing { expected: usize, got: usize },

    #[error("packed buffer integrity error: {0}")]
    Integrity(String),

    #[error("keys already carry a temporal rotation")]
    DoubleTemporalRotation,

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
