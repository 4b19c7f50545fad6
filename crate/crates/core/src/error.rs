use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An environment or trainer configuration that cannot be honoured.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition (bad action index, shape mismatch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint error in layer `{layer}`: {reason}")]
    Checkpoint { layer: String, reason: String },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
