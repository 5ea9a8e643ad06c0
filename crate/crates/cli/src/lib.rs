//! Command implementations behind the `syncmatrix` binary.

pub mod commands;
pub mod config;

use std::path::Path;

use syncmatrix_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// A failed command: exit code plus a one-line diagnostic.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    /// Wraps a library error raised while handling `path`.
    pub fn at(path: &Path, e: Error) -> Self {
        let f = Self::from(e);
        Self { message: format!("{}: {}", path.display(), f.message), ..f }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Format(_) => EXIT_IO,
        Error::Numeric(_) | Error::Training(_) | Error::Degenerate(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let message = e.to_string().replace('\n', " ");
        Self { code: exit_code(&e), message }
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;
