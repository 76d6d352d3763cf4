use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("truncated record: {len} bytes is not a multiple of {record} (trailing {trailing} bytes at offset {offset})")]
    TruncatedRecord {
        len: usize,
        record: usize,
        trailing: usize,
        offset: usize,
    },

    #[error("event at ({x}, {y}) outside sensor {width}x{height}{}", .location.as_deref().map(|l| format!(" ({l})")).unwrap_or_default())]
    OutOfBounds {
        x: u32,
        y: u32,
        width: u32,
        height: u32,
        location: Option<String>,
    },

    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("timestamp {t} does not fit in the 23-bit binary field")]
    TimestampOverflow { t: u64 },

    #[error("event stream is empty")]
    EmptyStream,

    #[error("invalid voxel cell size ({h}, {w}, {t})")]
    InvalidCell { h: f64, w: f64, t: f64 },

    #[error("graph has no nodes")]
    EmptyGraph,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("format mismatch: {0}")]
    FormatMismatch(String),

    #[error("shape mismatch for parameter `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { loss: f64, epoch: usize, batch: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::TruncatedRecord { .. } => "truncated_record",
            Error::OutOfBounds { .. } => "out_of_bounds",
            Error::MalformedLine { .. } => "malformed_line",
            Error::TimestampOverflow { .. } => "timestamp_overflow",
            Error::EmptyStream => "empty_stream",
            Error::InvalidCell { .. } => "invalid_cell",
            Error::EmptyGraph => "empty_graph",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::InvalidConfig(_) => "invalid_config",
            Error::FormatMismatch(_) => "format_mismatch",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::EmptyDataset => "empty_dataset",
            Error::Io { .. } => "io",
        }
    }
}
