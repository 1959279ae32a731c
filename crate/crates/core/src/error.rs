use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("parameter `{0}` not found")]
    MissingParam(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("action {action} of agent {agent} out of range (n_actions = {n_actions})")]
    InvalidAction { agent: usize, action: usize, n_actions: usize },

    #[error("expected {expected} actions, got {got}")]
    JointActionLength { expected: usize, got: usize },

    #[error("step called on a terminated episode")]
    EpisodeTerminated,

    #[error("operation requires a single-step SecretSlots environment")]
    NotSecretSlots,

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("missing prerequisite artifact {0}")]
    MissingPrerequisite(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config hash mismatch: artifact has {found}, config has {expected}")]
    HashMismatch { expected: String, found: String },

    #[error("training diverged at episode {episodes} (loss = {loss}); dump:\n{dump}")]
    Diverged { episodes: usize, loss: f64, dump: String },

    #[error("report: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Shape { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
    }
}
