use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pre-training pipeline.
#[derive(Debug, Error)]
pub enum PheError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("edge at {path}:{line} references unknown node `{node}`")]
    DanglingEndpoint {
        path: PathBuf,
        line: usize,
        node: String,
    },

    #[error("{path}:{line}: feature dimension {found} does not match dimension {expected}")]
    FeatureDimension {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}:{line}: duplicate node id `{node}`")]
    DuplicateNode {
        path: PathBuf,
        line: usize,
        node: String,
    },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("invalid {kind} id {id}")]
    InvalidId { kind: &'static str, id: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("configuration errors: {}", .0.join("; "))]
    ConfigKeys(Vec<String>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("corrupt checkpoint at byte offset {offset}: {message}")]
    CorruptCheckpoint { offset: usize, message: String },

    #[error("checkpoint does not match model: missing keys [{}]", .missing.join(", "))]
    CheckpointMismatch { missing: Vec<String> },

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged {
        epoch: usize,
        batch: usize,
        last_finite: Box<crate::pretrain::Checkpoint>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PheError> = std::result::Result<T, E>;

impl PheError {
    /// Whether the error stems from user input (bad files, bad config)
    /// rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PheError::Parse { .. }
                | PheError::DanglingEndpoint { .. }
                | PheError::FeatureDimension { .. }
                | PheError::DuplicateNode { .. }
                | PheError::Schema(_)
                | PheError::InvalidId { .. }
                | PheError::Config(_)
                | PheError::ConfigKeys(_)
                | PheError::CorruptCheckpoint { .. }
                | PheError::CheckpointMismatch { .. }
        )
    }
}
