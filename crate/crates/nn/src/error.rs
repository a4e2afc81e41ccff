use thiserror::Error;

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("layer {layer}: expected input width {expected}, got {got}")]
    LayerInput {
        layer: usize,
        expected: usize,
        got: usize,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("embedding dimension must be even and >= 2, got {0}")]
    EmbeddingDim(usize),

    #[error("variable does not belong to this graph (backward requires a forward pass on the same graph)")]
    ForeignVariable,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    FiniteDifferenceStep(f64),

    #[error("checkpoint corrupted at byte offset {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint spec mismatch: {0}")]
    SpecMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
