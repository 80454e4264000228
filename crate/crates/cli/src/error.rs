use nalab::checkpoint::CheckpointError;
use nalab::training::TrainError;
use nalab::TensorError;

/// Failures of a command, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("gradient check failed: {0}")]
    Gradcheck(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Checkpoint(_) => 3,
            Self::Diverged(_) | Self::Gradcheck(_) | Self::Failed(_) => 1,
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Config(m) => Self::Config(m),
            TensorError::NonFinite { .. } | TensorError::NonFiniteInput { .. } => Self::Diverged(e.to_string()),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Checkpoint(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_divergence() {
            return Self::Diverged(e.to_string());
        }
        match e {
            TrainError::Tensor(t) => t.into(),
            TrainError::Checkpoint(c) => c.into(),
            other => Self::Failed(other.to_string()),
        }
    }
}

pub fn io_error(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Failed(format!("{}: {e}", path.display()))
}
