use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("invalid token id {id} for vocabulary of size {vocab_size}")]
    InvalidTokenId { id: u32, vocab_size: usize },

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("template is missing the {0} placeholder")]
    MissingPlaceholder(&'static str),

    #[error("template has more than one {0} placeholder")]
    DuplicatePlaceholder(&'static str),

    #[error("invalid verbalizers: {0}")]
    InvalidVerbalizers(String),

    #[error("prompt is already complete ({0} tokens)")]
    PromptComplete(usize),

    #[error("no admissible action at step {0}")]
    EmptyActionSet(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint does not match policy configuration: {0}")]
    CheckpointMismatch(String),

    #[error("{0}")]
    OutOfRange(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid example: {0}")]
    InvalidExample(String),

    #[error("environment is not a classifier")]
    NotAClassifier,

    #[error("remote environment unavailable: {0}")]
    RemoteUnavailable(String),

    #[error("remote request timed out: {0}")]
    Timeout(String),

    #[error("remote protocol error (HTTP {status}): {body}")]
    ProtocolError { status: u16, body: String },

    #[error("schema error: {0}")]
    SchemaError(String),

    #[error("sequences differ in length: {0}")]
    LengthMismatch(String),

    #[error("history holds {available} distinct prompts, {requested} requested")]
    InsufficientHistory { available: usize, requested: usize },

    #[error("non-finite training loss at step {step}: {diagnostic}")]
    NonFiniteLoss { step: u64, diagnostic: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by an unreachable or misbehaving remote endpoint.
    pub fn is_remote(&self) -> bool {
        matches!(
            self,
            Error::RemoteUnavailable(_) | Error::Timeout(_) | Error::ProtocolError { .. }
        )
    }
}
