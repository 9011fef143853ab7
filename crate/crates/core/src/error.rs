use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("adjacency must be square, got {rows}x{cols}")]
    NonSquareAdjacency { rows: usize, cols: usize },

    #[error("adjacency has negative entry {value} at ({row}, {col})")]
    NegativeAdjacency { row: usize, col: usize, value: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("graph has no edges; clustering objective is undefined")]
    EdgelessGraph,

    #[error("cluster count {k} is invalid for {nodes} nodes")]
    InvalidClusterCount { k: usize, nodes: usize },

    #[error("backward already ran on this tape; record a new forward pass first")]
    TapeConsumed,

    #[error("match index out of range: {0}")]
    MatchIndex(String),

    #[error("invalid match list: {0}")]
    InvalidMatches(String),

    #[error("clip has no phase label")]
    MissingLabel,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}
