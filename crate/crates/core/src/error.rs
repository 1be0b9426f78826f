use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("png decode failed: {0}")]
    Png(String),

    #[error("bad magic")]
    BadMagic,

    #[error("malformed tensor header: {0}")]
    MalformedHeader(String),

    #[error("dim overflow: extents {0:?} do not fit in memory")]
    DimOverflow(Vec<u32>),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),

    #[error("tensor contains non-finite value at element {0}")]
    NonFinite(usize),

    #[error("invalid rate list {input:?}: {reason}")]
    RateList { input: String, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no valid elements to evaluate")]
    Empty,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
