use thiserror::Error;

/// Errors surfaced by the engine. Variants carry enough context to act on
/// without re-deriving state from the call site.
#[derive(Error, Debug)]
pub enum NcrError {
    #[error("shape mismatch in {primitive}: {details}")]
    ShapeMismatch { primitive: &'static str, details: String },

    #[error("unknown {kind} id `{id}`")]
    UnknownId { kind: &'static str, id: String },

    #[error("expression history is empty")]
    EmptyHistory,

    #[error("target item `{0}` already appears in the history")]
    DuplicateTarget(String),

    #[error("event set is empty; regularizers need at least one event vector")]
    EmptyEventSet,

    #[error("backward expects a scalar loss, got shape {0}x{1}")]
    NonScalarLoss(usize, usize),

    #[error("tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("graph builder is non-deterministic: two forward passes differ (is dropout enabled?)")]
    NonDeterministic,

    #[error("NaN gradient in parameter `{0}`")]
    NanGradient(String),

    #[error("NaN loss at epoch {0}; aborting with last good checkpoint")]
    NanLoss(usize),

    #[error("user `{user}` has no non-interacted item to sample")]
    ExhaustedUniverse { user: String },

    #[error("candidate pool too small for user `{user}`: need {need}, have {have}")]
    InsufficientPool { user: String, need: usize, have: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: file has {found}, engine expects {expected}")]
    CheckpointVersion { found: u16, expected: u16 },

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("no valid interaction rows in `{0}`")]
    EmptyInput(String),

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NcrError>;
