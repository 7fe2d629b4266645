use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure mode surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{axis} of {size} pixels is not divisible by patch size {patch}")]
    NotDivisible {
        axis: Axis,
        size: usize,
        patch: usize,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),

    #[error("checkpoint does not match model: missing {missing:?}, extra {extra:?}")]
    TensorMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("non-finite loss {loss} at step {step} on clip {clip}")]
    NonFiniteLoss { step: u64, clip: usize, loss: f64 },

    #[error("fewer than 3 non-degenerate directions in reference features")]
    DegenerateRank,

    #[error("config error at line {line}, key `{key}`: {message}")]
    Config {
        line: usize,
        key: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Path {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("png encoding: {0}")]
    Png(#[from] png::EncodingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::Height => f.write_str("height"),
            Axis::Width => f.write_str("width"),
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

impl Error {
    pub(crate) fn at_path(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Path {
            path: path.display().to_string(),
            source,
        }
    }
}
