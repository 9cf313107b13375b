use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum NsgError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("malformed {file}: {msg}")]
    Format { file: String, msg: String },

    #[error("{file}: self-loop at line {line}")]
    SelfLoop { file: String, line: usize },

    #[error("{file}: duplicate edge ({u},{v}) at line {line}")]
    DuplicateEdge {
        file: String,
        line: usize,
        u: usize,
        v: usize,
    },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("isolated sub-node {0} has zero degree under symmetric normalization")]
    IsolatedNode(usize),

    #[error("backward requires a 1x1 loss, got {0}x{1}")]
    NonScalarLoss(usize, usize),

    #[error("missing spanning tree for node {0}")]
    MissingTree(usize),

    #[error("task mismatch: {0}")]
    TaskMismatch(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, NsgError>;

impl NsgError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            NsgError::MissingFile(path)
        } else {
            NsgError::Io { path, source }
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        NsgError::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn format(file: impl Into<String>, msg: impl Into<String>) -> Self {
        NsgError::Format {
            file: file.into(),
            msg: msg.into(),
        }
    }
}
