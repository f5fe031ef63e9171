use std::path::PathBuf;

use thiserror::Error;

use crate::kernels::{Family, Support};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter {theta} is outside the {support:?} support")]
    OutsideSupport { theta: f64, support: Support },

    #[error("observation {y} is not valid for the {family:?} kernel")]
    InvalidObservation { y: f64, family: Family },

    #[error("no observations")]
    Empty,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("support grid does not cover observation {index} (y = {y}): every likelihood is zero")]
    GridCoverage { index: usize, y: f64 },

    #[error("bootstrap replicate {replicate} failed: {source}")]
    Replicate {
        replicate: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("fold {fold} refit failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss at weight vector {weight_index}, observation {observation}")]
    NonFiniteLoss { weight_index: usize, observation: usize },

    #[error("training aborted after {epochs} consecutive non-finite epochs (last epoch {last_epoch})")]
    TrainingDiverged { epochs: usize, last_epoch: usize },

    #[error("mixture likelihood underflowed for observation {index} (y = {y})")]
    Underflow { index: usize, y: f64 },

    #[error("every candidate bandwidth gives an infinite cross-validation loss")]
    NoFiniteBandwidth,

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("unsupported checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
