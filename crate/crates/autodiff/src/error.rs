use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{kind}: incompatible shapes {shapes:?} ({detail})")]
    ShapeMismatch {
        kind: &'static str,
        shapes: Vec<Vec<usize>>,
        detail: String,
    },

    #[error("unknown operation kind `{0}`")]
    UnknownKind(String),

    #[error("{kind}: missing or invalid attribute `{attr}`")]
    BadAttribute { kind: String, attr: String },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("{kind} produced a non-finite value")]
    NonFinite { kind: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("no gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("function is not deterministic at the check point (loss {first} then {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid optimizer setting: {0}")]
    InvalidOptimizer(String),

    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),
}
