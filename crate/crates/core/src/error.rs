use thiserror::Error;

/// Errors raised by the syncmatrix library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("insufficient frames: need at least {need}, got {got}")]
    InsufficientFrames { need: usize, got: usize },
    #[error("insufficient length: {0}")]
    InsufficientLength(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("undefined relative error reduction: baseline accuracy is 100%")]
    UndefinedRer,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
