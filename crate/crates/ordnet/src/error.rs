use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum OrdError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OrdError>;
