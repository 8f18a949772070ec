use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unbound leaf `{0}`")]
    UnboundLeaf(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("empty sequence")]
    EmptySequence,

    #[error("task group {group} has no readout head")]
    MissingHead { group: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("token {token} out of vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("invalid task spec: {0}")]
    InvalidSpec(String),

    #[error("split fractions overflow: {0}")]
    FractionOverflow(String),

    #[error("trajectory length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("empty split: {0}")]
    EmptySplit(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("analysis precondition failed: {0}")]
    Analysis(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
