use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum GqsError {
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("position {position} outside [1, {max}]")]
    PositionOutOfRange { position: usize, max: usize },

    #[error("missing importance weight for response {0}")]
    MissingWeight(String),

    #[error("invalid weight {weight} for response {response_id}")]
    InvalidWeight { response_id: String, weight: f64 },

    #[error("dataset must contain both click labels")]
    SingleClass,

    #[error("no candidate reaches the diversity threshold")]
    NoChosen,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("decoding failed after {attempts} attempts: {reason}")]
    Decode { attempts: usize, reason: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("run directory {0} is locked by another writer")]
    Locked(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GqsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GqsError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, GqsError>;
