use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Input shape does not match what a layer or operation expects.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Input values violate a precondition (non-normalized simplex, bad rows, ...).
    #[error("rejected input: {0}")]
    RejectedInput(String),

    /// An operation was called out of order (step after terminal, backward without cache, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Invalid configuration or out-of-bounds initial conditions.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training produced a non-finite loss or otherwise diverged.
    #[error("training error: {0}")]
    Training(String),

    /// A file could not be parsed into the expected structure.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
