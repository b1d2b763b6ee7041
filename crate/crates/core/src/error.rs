use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor/kernel/map shapes are incompatible for the requested operation.
    ShapeMismatch(String),
    /// An argument is outside its documented domain (bad beta, even kernel, ...).
    InvalidArgument(String),
    /// A numerical guard tripped: log of a non-positive value, NaN/Inf produced.
    NonFinite(String),
    /// Training diverged (loss became non-finite).
    Diverged { stage: usize, epoch: usize },
    /// Malformed file content; names the file and the offending field.
    Parse { file: String, detail: String },
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Diverged { stage, epoch } => {
                write!(f, "training diverged at stage {stage}, epoch {epoch}")
            }
            Error::Parse { file, detail } => write!(f, "malformed file {file}: {detail}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

/// Shorthand for constructing a `ShapeMismatch` error.
macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::ShapeMismatch(format!($($arg)*))
    };
}

/// Shorthand for constructing an `InvalidArgument` error.
macro_rules! arg_err {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}

pub(crate) use arg_err;
pub(crate) use shape_err;
