use std::path::PathBuf;

use nalgebra::Vector3;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("euler angles {0:?} outside the admissible box")]
    EulerDomain(Vector3<f64>),

    #[error("euler rate map is singular at pitch {pitch} rad")]
    EulerSingular { pitch: f64 },

    #[error("integration diverged: state magnitude {magnitude:e}")]
    Divergence { magnitude: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("insufficient history: need {needed} samples, have {have}")]
    InsufficientHistory { needed: usize, have: usize },

    #[error("matrix is rank deficient (smallest singular value {sigma_min:e})")]
    RankDeficient { sigma_min: f64 },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },

    #[error("no contraction rate in [{lo}, {hi}] is feasible")]
    NoneFeasible { lo: f64, hi: f64 },

    #[error("semidefinite program failed: {0}")]
    Sdp(String),

    #[error("schema version {found} is not supported (expected {expected})")]
    Schema { expected: u32, found: u32 },

    #[error("malformed {what}: {reason}")]
    Malformed { what: &'static str, reason: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
