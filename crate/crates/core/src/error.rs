use std::path::PathBuf;

/// Errors produced anywhere in the recognition pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("state error: {0}")]
    State(String),
    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("format error: {0}")]
    Format(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! param_err {
    ($($arg:tt)*) => { $crate::error::Error::Param(format!($($arg)*)) };
}
macro_rules! format_err {
    ($($arg:tt)*) => { $crate::error::Error::Format(format!($($arg)*)) };
}
pub(crate) use {format_err, param_err, shape_err};
