//! Error type shared by every core module.

use alloc::string::String;
use core::fmt;

/// Convenience alias used throughout the crate.
pub type Result<T> = core::result::Result<T, Error>;

/// Structured errors for the numeric core.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor/operator shape disagreement (dimension counts, extents, batch sizes).
    Shape(String),
    /// Invalid data fed to an operation (out-of-range label, unnormalized signal, ...).
    Validation(String),
    /// Inconsistent or impossible configuration (bad hyperparameter, missing generator, ...).
    Config(String),
    /// API misuse (backward on a non-scalar, bank smaller than M, ...).
    Usage(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}

macro_rules! validation_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Validation(alloc::format!($($arg)*))
    };
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(alloc::format!($($arg)*))
    };
}

macro_rules! usage_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Usage(alloc::format!($($arg)*))
    };
}

pub(crate) use {config_err, shape_err, usage_err, validation_err};
