use autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("prompt of length {len} exceeds the maximum of {max}")]
    PromptTooLong { len: usize, max: usize },

    #[error("encoder stack is frozen")]
    Frozen,

    #[error("feature is not unit-normalized (norm {0})")]
    Unnormalized(f64),

    #[error(
        "pretraining stopped after {steps} steps with held-out retrieval top-1 {top1:.3} \
         below the target {target:.3}"
    )]
    PretrainTargetMissed { steps: usize, top1: f64, target: f64 },

    #[error("non-finite loss at step {step} (ce {ce}, kd {kd}): {source}")]
    NonFiniteLoss {
        step: usize,
        ce: f64,
        kd: f64,
        #[source]
        source: AutodiffError,
    },

    #[error("training state is not ready: {0}")]
    Untrained(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("missing required config key `{0}`")]
    MissingKey(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
