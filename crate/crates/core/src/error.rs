use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("raw image size mismatch: expected {expected} bytes, got {actual}")]
    RawSizeMismatch { expected: usize, actual: usize },

    #[error("sample {value} at index {index} does not fit in {bit_depth} bits")]
    SampleOutOfRange {
        index: usize,
        value: u32,
        bit_depth: u8,
    },

    #[error("unsupported bit depth {0} (expected 8, 12 or 16)")]
    BitDepth(u8),

    #[error("invalid dimensions {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{what}: {size} is not divisible by {by}")]
    NotDivisible {
        what: &'static str,
        size: usize,
        by: usize,
    },

    #[error("coordinate ({x}, {y}) outside {width}x{height}")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("perplexity {target} unreachable: best sigma {sigma}, entropy {entropy} bits")]
    PerplexityUnreachable {
        target: f64,
        sigma: f64,
        entropy: f64,
    },

    #[error("q is zero where p is positive at ({0}, {1})")]
    ZeroQ(usize, usize),

    #[error("case id mismatch: {0}")]
    IdMismatch(String),

    #[error("dataset variant {variant} requires {missing}")]
    MissingInput {
        variant: &'static str,
        missing: &'static str,
    },

    #[error("not enough samples to stratify: {0}")]
    Stratify(String),

    #[error("malformed {kind}: {msg}")]
    Malformed { kind: &'static str, msg: String },

    #[error("input not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::NotFound(path.into());
        }
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(kind: &'static str, msg: impl Into<String>) -> Self {
        Error::Malformed {
            kind,
            msg: msg.into(),
        }
    }
}
