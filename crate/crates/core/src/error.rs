use std::path::PathBuf;

use thiserror::Error;

use crate::regression::RankReport;

pub type Result<T, E = DktvError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DktvError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("batch has {columns} columns but at least {required} (r + m) are needed")]
    InsufficientColumns { columns: usize, required: usize },

    #[error(
        "lifted data is rank deficient: rank(G) = {} (need {}), rank([G; U]) = {} (need {}); \
         use a larger batch or a smaller lifted dimension",
        .0.rank_g, .0.required_g, .0.rank_chi, .0.required_chi
    )]
    RankDeficient(RankReport),

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("all samples are identical; Lipschitz ratio is undefined")]
    IdenticalSamples,

    #[error("pitch angle {pitch} is too close to the Euler-angle singularity")]
    GimbalSingularity { pitch: f64 },

    #[error("horizon {horizon} exceeds batch size {beta}")]
    HorizonTooLong { horizon: usize, beta: usize },

    #[error("batch index mismatch: snapshot is at tau = {snapshot}, batch has tau = {batch}")]
    BatchOrder { snapshot: usize, batch: usize },

    #[error("error-bound history is empty")]
    EmptyHistory,

    #[error("not enough samples: have {have}, need {need}")]
    NotEnoughSamples { have: usize, need: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no snapshots found under {0}")]
    MissingSnapshots(PathBuf),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DktvError {
    pub(crate) fn dims(what: impl Into<String>, expected: usize, found: usize) -> Self {
        DktvError::DimensionMismatch {
            what: what.into(),
            expected,
            found,
        }
    }
}
