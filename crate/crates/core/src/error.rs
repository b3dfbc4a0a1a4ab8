use std::io;

/// Errors produced by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing data: {0} unexpected bytes after payload")]
    TrailingBytes(usize),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("mask is not one-hot at spatial position ({s}, {t})")]
    NotOneHot { s: usize, t: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("malformed data: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimMismatch(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
