use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient rows: need at least {needed} rows after skipping {skipped}, have {available}")]
    InsufficientRows {
        needed: usize,
        skipped: usize,
        available: usize,
    },

    #[error("head {head} has no cached rows")]
    EmptyCache { head: usize },

    #[error("index {index} out of range for sequence of length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("unsupported trace version {found:?} (expected {expected:?})")]
    BadVersion { found: String, expected: &'static str },

    #[error("tensor {name:?} missing from manifest")]
    MissingTensor { name: String },

    #[error("shape mismatch for tensor {name:?}: {detail}")]
    ShapeMismatch { name: String, detail: String },

    #[error("checksum mismatch for tensor {name:?}")]
    Checksum { name: String },

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("layer {layer} head {head}: {source}")]
    Head {
        layer: usize,
        head: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest parse error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn at_head(self, layer: usize, head: usize) -> Self {
        Error::Head {
            layer,
            head,
            source: Box::new(self),
        }
    }
}
