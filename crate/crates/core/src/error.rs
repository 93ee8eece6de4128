use thiserror::Error;

/// Errors shared across the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Layouts or dimensions of two parameter vectors do not agree.
    #[error("layout mismatch: {0}")]
    Layout(String),

    /// A configuration value violates its precondition.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A caller broke an operation contract (shape, range, emptiness).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A serialized artifact could not be decoded.
    #[error("malformed file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
