//! Crate-wide error type. Variants are grouped so the CLI can map them onto
//! its exit-code classes (usage/config, data, numerical).

use thiserror::Error;

use crate::graph::UnitId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{row}: column {column}: expected a number, got {value:?}")]
    NonNumericCell {
        path: String,
        row: usize,
        column: String,
        value: String,
    },

    #[error("{path}:{row}: duplicate grid id {id}")]
    DuplicateGridId { path: String, row: usize, id: usize },

    #[error("{path}: malformed csv: {message}")]
    MalformedCsv { path: String, message: String },

    #[error("unknown unit {0}")]
    UnknownUnit(UnitId),

    #[error("inclusion is not a partition: {0}")]
    InclusionNotPartition(String),

    #[error("negative volume {volume} on flow {origin} -> {destination}")]
    NegativeVolume {
        origin: UnitId,
        destination: UnitId,
        volume: f64,
    },

    #[error("split ratios {0:?} must be positive and sum to 1")]
    InvalidRatios([f64; 3]),

    #[error("{0}")]
    InvalidConfig(String),

    #[error("indicators are not standardized (no stored statistics)")]
    Unstandardized,

    #[error("indicator table has no {0:?} column")]
    MissingIndicatorColumn(String),

    #[error("loss lengths differ: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),

    #[error("empty input where at least one element is required")]
    EmptyInput,

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("city {0} has no inter-level flow records")]
    NoInterLevelFlows(UnitId),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    /// Process exit code class: 1 usage/config, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::InvalidRatios(_) => 1,
            Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}
