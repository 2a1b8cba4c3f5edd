use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("numerical instability at step {step}: {detail}")]
    NumericalInstability { step: usize, detail: String },

    #[error("simulation failed at z = {z:?}: {source}")]
    SimulationAtLatent {
        z: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("region growth trapped at size {reached} (target {target})")]
    RegionTrapped { reached: usize, target: usize },

    #[error("model corrupt: {0}")]
    ModelCorrupt(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("kernel matrix ill-conditioned even with jitter {max_jitter:e}")]
    IllConditioned { max_jitter: f64 },

    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("too many non-finite log-density values ({excluded} of {total})")]
    TooManyExclusions { excluded: usize, total: usize },

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dims(expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch { expected: expected.to_string(), got: got.to_string() }
    }

    /// True for failures caused by numerics rather than inputs or IO.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NumericalInstability { .. }
                | Error::SimulationAtLatent { .. }
                | Error::ModelCorrupt(_)
                | Error::TrainingDiverged { .. }
                | Error::IllConditioned { .. }
                | Error::DegenerateDensity(_)
                | Error::UndefinedCorrelation(_)
                | Error::TooManyExclusions { .. }
        )
    }
}
