use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: coordinates must be finite with x1 < x2 and y1 < y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("box degenerates to zero area after clipping to {width}x{height}")]
    DegenerateBox { width: f64, height: f64 },

    #[error("bad magic {found:?}, expected \"ARTF\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("payload size mismatch: header implies {expected} bytes, found {actual}")]
    PayloadSize { expected: usize, actual: usize },

    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero vector has no direction")]
    DegenerateVector,

    #[error("base entropy is zero, relative gain undefined")]
    ZeroBaseEntropy,

    #[error("text is empty after normalization")]
    EmptyText,

    #[error("tracking list frames must be strictly increasing (frame {prev} followed by {next})")]
    UnorderedTrack { prev: usize, next: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
