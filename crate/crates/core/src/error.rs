use std::io;

use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Variants map onto the CLI exit codes: configuration and contract problems
/// are usage errors, `Numeric` is a training abort, `Io`/`Format` are I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("solver error: {0}")]
    Solver(String),
    #[error("numeric failure at epoch {epoch}, batch {batch}: {message}")]
    Numeric {
        epoch: usize,
        batch: usize,
        message: String,
    },
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
