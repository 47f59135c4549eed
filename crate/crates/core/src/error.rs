use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("capacity error: sequence of {len} exceeds limit {max} ({what})")]
    Capacity {
        what: &'static str,
        len: usize,
        max: usize,
    },

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("degenerate batch: every position is masked")]
    DegenerateBatch,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("benchmark error: {0}")]
    Benchmark(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Distinct failure modes when reading a checkpoint file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor {name}: dtype {found} does not match model dtype {expected}")]
    DtypeMismatch {
        name: String,
        found: String,
        expected: String,
    },
    #[error("tensor {name}: shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0} missing from checkpoint")]
    MissingTensor(String),
    #[error("checkpoint holds unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("trailing bytes after tensor data")]
    TrailingBytes,
    #[error("malformed header: {0}")]
    Malformed(String),
}
