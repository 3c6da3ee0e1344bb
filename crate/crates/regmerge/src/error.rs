//! Crate-wide error type and its mapping onto process exit codes.

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad user input: inconsistent shapes, invalid config values, malformed files.
    #[error("{0}")]
    Validation(String),

    /// A Gram matrix could not be factorized even after ridge escalation.
    #[error("gram matrix numerically singular")]
    SingularGram,

    /// The training loss left the finite range.
    #[error("training diverged at step {step}{}", .task.as_ref().map(|t| format!(" (task {t})")).unwrap_or_default())]
    TrainingDiverged { step: u64, task: Option<usize> },

    /// Two checkpoints (or a checkpoint and a merge state) disagree on layer structure.
    #[error("checkpoint topology drift: {0}")]
    TopologyDrift(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 0 success, 2 validation, 3 numerical failure,
    /// 4 consistency/topology failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::SingularGram | Error::TrainingDiverged { .. } => 3,
            Error::TopologyDrift(_) => 4,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Attach the failing task's sequence index where the variant can carry it.
    pub(crate) fn with_task(self, task: usize) -> Self {
        match self {
            Error::Validation(m) => Error::Validation(format!("task {task}: {m}")),
            Error::TopologyDrift(m) => Error::TopologyDrift(format!("task {task}: {m}")),
            Error::TrainingDiverged { step, task: None } => Error::TrainingDiverged {
                step,
                task: Some(task),
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
