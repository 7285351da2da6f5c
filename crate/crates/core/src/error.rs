use thiserror::Error;

use crate::diffusion::State;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("degenerate forward kernel at t={t}: alpha_t == alpha_(t-1)")]
    DegenerateKernel { t: usize },
    #[error("rollout diverged for trajectory {trajectory} after {} states", prefix.len())]
    RolloutDivergence { trajectory: usize, prefix: Vec<State> },
    #[error("unknown reward id `{0}`")]
    UnknownReward(String),
    #[error("stale batch: expected policy version {expected}, found {found}")]
    StaleBatch { expected: u64, found: u64 },
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFiniteLoss { what: String, epoch: usize, step: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Process exit code for the CLI: 2 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerics(NumericsError::NonFinite { .. })
            | Error::RolloutDivergence { .. }
            | Error::NonFiniteLoss { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
