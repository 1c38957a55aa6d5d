use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic {found:02x?}")]
    BadMagic { path: PathBuf, found: Vec<u8> },
    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {found} trailing bytes after the payload")]
    TrailingBytes { path: PathBuf, found: usize },
    #[error("{path}: dimensions {dims:?} overflow the addressable size")]
    DimensionOverflow { path: PathBuf, dims: Vec<u64> },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: header {found:?} does not match {expected:?}")]
    HeaderMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error("robustness not found: no budget up to {eps_hi} reached a fooling rate above {delta}")]
    NotFound { eps_hi: f32, delta: f64 },
    #[error(transparent)]
    Core(#[from] sharedadv_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Process exit code for this failure.
    pub fn exit_code(&self) -> i32 {
        use sharedadv_core::Error as E;
        match self {
            Error::Config(_) => 2,
            Error::Core(E::Diverged { .. } | E::NonFinite(_)) => 4,
            Error::Core(_) => 2,
            Error::NotFound { .. } => 5,
            _ => 3,
        }
    }
}
