use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the grounding stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("unknown tensor name `{0}` in checkpoint")]
    UnknownTensor(String),

    #[error("tensor `{0}` missing from checkpoint")]
    MissingTensor(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error stems from numerical breakdown rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::DegenerateBatch(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
