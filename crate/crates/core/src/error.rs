use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not compose.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A NaN or infinity appeared where only finite values are allowed.
    NonFinite(&'static str),
    /// A parameter is outside its documented range.
    InvalidArgument(String),
    /// An input collection that must be nonempty was empty.
    Empty(&'static str),
    /// Training produced a non-finite loss.
    Diverged { epoch: usize, batch: usize },
    /// A randomized construction failed after its retry budget.
    Infeasible(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            Error::NonFinite(op) => write!(f, "{op}: non-finite value"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Empty(what) => write!(f, "{what} is empty"),
            Error::Diverged { epoch, batch } => {
                write!(f, "training diverged at epoch {epoch}, batch {batch}")
            }
            Error::Infeasible(msg) => write!(f, "infeasible: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
