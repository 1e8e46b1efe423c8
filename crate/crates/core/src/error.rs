use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes or channel counts do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// NaN or infinity where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A parameter is outside its allowed range.
    #[error("argument error: {0}")]
    Argument(String),
    /// A file does not follow the expected on-disk format.
    #[error("format error: {0}")]
    Format(String),
    /// Reading a file failed.
    #[error("read error on {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Writing a file failed.
    #[error("write error on {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Training produced a NaN or infinite loss term.
    #[error("non-finite loss at step {step}: term `{term}` = {value}")]
    NonFiniteLoss {
        step: usize,
        term: &'static str,
        value: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
