use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate row {row}: no allowed columns")]
    DegenerateRow { row: usize },

    #[error("empty loss: every target position is ignored")]
    EmptyLoss,

    #[error("graph error: {0}")]
    Graph(String),

    #[error("index ({row}, {col}) out of range for a {size}x{size} mask")]
    IndexOutOfRange { row: usize, col: usize, size: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-parsable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::DegenerateRow { .. } => "degenerate_row",
            Error::EmptyLoss => "empty_loss",
            Error::Graph(_) => "graph",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Integrity(_) => "integrity",
            Error::Version { .. } => "version",
            Error::EmptyDataset => "empty_dataset",
            Error::Io { .. } => "io",
            Error::Parse(_) => "parse",
        }
    }
}
