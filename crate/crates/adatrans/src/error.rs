use alloc::string::String;
use core::fmt;

/// Error type shared by the whole crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A primitive was applied to tensors whose shapes do not conform to its
    /// shape rule. Carries the primitive name and a rendering of the shapes.
    ShapeMismatch { op: &'static str, detail: String },
    /// `backward` was called on a tensor that is not a scalar.
    NonScalarOutput { len: usize },
    /// A non-finite value appeared where one is not allowed.
    NonFinite { context: String },
    /// A precondition on an argument was violated.
    InvalidArgument { context: String },
    /// A training loop exceeded its divergence threshold.
    Diverged { context: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::NonScalarOutput { len } => {
                write!(f, "backward requires a scalar output, got {len} elements")
            }
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::InvalidArgument { context } => write!(f, "invalid argument: {context}"),
            Error::Diverged { context } => write!(f, "diverged: {context}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
