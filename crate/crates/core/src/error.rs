use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("gradient tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("genome parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid genome: {}", .0.join("; "))]
    InvalidGenome(Vec<String>),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("boundary ordering violated: {0}")]
    Boundaries(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("empty input: {0}")]
    Empty(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}
pub(crate) use shape_err;
