use thiserror::Error;
use veristeer_nn::NnError;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Nn(#[from] NnError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("diffusion step {step} outside 1..={max}")]
    DiffusionStep { step: usize, max: usize },

    #[error("cannot step a terminal episode")]
    TerminalStep,

    #[error("trajectory is not terminal")]
    NotTerminal,

    #[error("transition index {index} outside trajectory of length {len}")]
    TransitionIndex { index: usize, len: usize },

    #[error("demo generation failed: {0}")]
    DemoGeneration(String),

    #[error("empty dataset: {0}")]
    Empty(&'static str),

    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("dataset contains a single class; both successes and failures are required")]
    SingleClass,

    #[error("labels must be 0 or 1, found {0}")]
    NonBinaryLabel(f64),

    #[error("non-finite guided sample at diffusion step {step}")]
    NonFiniteGuidance { step: usize },

    #[error("non-finite verifier gradient")]
    NonFiniteGradient,

    #[error("dataset record {line}: {reason}")]
    Record { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
