use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by validation and by the training loop.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    Shape { op: &'static str, detail: String },
    /// A class index is outside `[0, classes)`.
    IndexOutOfRange { index: usize, classes: usize },
    /// An argument is outside its documented domain.
    InvalidArgument(String),
    /// `backward` was called on a tensor with more than one element.
    NonScalarLoss { rows: usize, cols: usize },
    /// A computation produced NaN or an infinity; `op` names the first
    /// offending tape operation.
    NonFinite { op: &'static str, context: String },
    /// A posterior sample fell outside the region that maps back to its
    /// conditioning value. This is a sampler bug, not a data problem.
    SupportViolation(String),
    /// Sampling produced too many out-of-alphabet codes.
    OutOfAlphabet { retries: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::IndexOutOfRange { index, classes } => {
                write!(f, "class index {index} out of range for {classes} classes")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonScalarLoss { rows, cols } => {
                write!(f, "backward needs a scalar loss, got shape ({rows}, {cols})")
            }
            Error::NonFinite { op, context } => {
                write!(f, "non-finite value first produced by `{op}` ({context})")
            }
            Error::SupportViolation(msg) => write!(f, "posterior support violation: {msg}"),
            Error::OutOfAlphabet { retries } => {
                write!(f, "out-of-alphabet codes persisted after {retries} resampling rounds")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
