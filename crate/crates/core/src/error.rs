use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in `{name}`")]
    NonFinite { name: String },

    #[error("step called on a finished episode")]
    EpisodeFinished,

    #[error("action {action} out of range for agent {agent} ({n_actions} actions)")]
    InvalidAction {
        agent: usize,
        action: usize,
        n_actions: usize,
    },

    #[error("joint action space of {size} exceeds the enumeration limit {limit}")]
    JointSpaceTooLarge { size: usize, limit: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("gradient check: {0}")]
    GradCheck(String),

    #[error("unknown suite `{0}`")]
    UnknownSuite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical aborts get their own process exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
