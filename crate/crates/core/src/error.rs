use std::path::PathBuf;

use crate::memory::SiteKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: index {index} out of bounds for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index memory is frozen; record() rejected")]
    MemoryFrozen,

    #[error("index memory is not frozen; predict mode needs frozen memory")]
    MemoryNotFrozen,

    #[error("index memory has no entry for {0}")]
    MissingSite(SiteKey),

    #[error("malformed index list: {0}")]
    MalformedIndices(String),

    #[error("{path}: row {row}, column {column}: cannot parse {cell:?} as a number")]
    CsvCell {
        path: PathBuf,
        row: usize,
        column: usize,
        cell: String,
    },

    #[error("{path}: row {row} has {found} fields, expected {expected}")]
    CsvRagged {
        path: PathBuf,
        row: usize,
        found: usize,
        expected: usize,
    },

    #[error("{0}: file has no data rows")]
    EmptyFile(PathBuf),

    #[error("channel {name:?} has zero variance in the training split")]
    DegenerateChannel { name: String },

    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),

    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },

    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
