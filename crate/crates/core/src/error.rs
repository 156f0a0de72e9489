use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("payload size mismatch: header dims imply {expected} values, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid grid dims {0:?}")]
    InvalidGrid([usize; 3]),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("channel {channel} not normalised: sum = {sum}")]
    NotNormalised { channel: usize, sum: f64 },

    #[error("degenerate point configuration: {0}")]
    Degenerate(String),

    #[error("coplanar point configuration: condition number {condition:.3e}")]
    Coplanar { condition: f64 },

    #[error("singular matrix (|det| = {det:.3e})")]
    Singular { det: f64 },

    #[error("non-finite {what}")]
    NonFiniteTerm { what: String },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("NaN gradient produced by op `{op}` (node {node})")]
    NanGradient { op: &'static str, node: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
