use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("data generation failed after {attempts} attempts: {reason}")]
    GenerationFailed { attempts: usize, reason: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("no path from vertex {start} (component {start_component}) to vertex {goal} (component {goal_component})")]
    NoPath {
        start: usize,
        goal: usize,
        start_component: usize,
        goal_component: usize,
    },

    #[error("agent {agent}: no conflict-free path found")]
    AgentNoPath { agent: usize },

    #[error("invalid segment layout: {0}")]
    InvalidLayout(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("sampler diverged at denoising step {step}")]
    Divergence { step: usize },

    #[error("instance too large for exhaustive search: {0}")]
    InstanceTooLarge(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Domain failures (as opposed to usage or I/O problems).
    pub fn is_domain(&self) -> bool {
        matches!(
            self,
            Error::NoPath { .. }
                | Error::AgentNoPath { .. }
                | Error::GenerationFailed { .. }
                | Error::Divergence { .. }
                | Error::Numerical(_)
        )
    }
}
