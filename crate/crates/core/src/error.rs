use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("node {0} contributes more than one view")]
    DuplicateNode(usize),

    #[error("multi-view collection is empty")]
    EmptyCollection,

    #[error("empty input")]
    EmptyInput,

    #[error("histogram bin counts differ: {0} vs {1}")]
    BinCountMismatch(usize, usize),

    #[error("model cannot process views of {width}x{height}")]
    UnsupportedDimensions { width: u32, height: u32 },

    #[error("embedding has non-finite entries")]
    NonFiniteEmbedding,

    #[error("no stored embedding for capture {0}")]
    MissingEmbedding(String),

    #[error("no source node is available this round")]
    NoAvailableNodes,

    #[error("invalid counts: baseline {baseline}, transmitted {transmitted}")]
    InvalidCounts { baseline: usize, transmitted: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid view: {0}")]
    InvalidView(String),

    #[error("invalid histogram: {0}")]
    InvalidHistogram(String),

    #[error("not enough views: requested {requested}, available {available}")]
    NotEnoughViews { requested: usize, available: usize },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed raster {}: {reason}", path.display())]
    MalformedRaster { path: PathBuf, reason: String },

    #[error("malformed manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },

    #[error("sidecar {} shape mismatch: {reason}", path.display())]
    SidecarShapeMismatch { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
