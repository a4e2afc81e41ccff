//! Small dense-tensor neural network toolkit in `f64`.
//!
//! - [`Tensor`]: row-major arrays, GEMM via `matrixmultiply`.
//! - [`Graph`]: eager tape with reverse-mode differentiation for parameters
//!   and selected inputs.
//! - [`Mlp`]: linear / layer-norm / ReLU / dropout stacks described by [`MlpSpec`].
//! - [`AdamState`], [`Checkpoint`], [`check_gradients`], [`sinusoidal_embedding`].

pub mod checkpoint;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{hex_digest, Checkpoint};
pub use embedding::sinusoidal_embedding;
pub use error::{NnError, Result};
pub use gradcheck::check_gradients;
pub use graph::{bce_with_logits, layer_norm_rows, log_sigmoid, sigmoid, Graph, Var};
pub use layers::{Activation, LayerSpec, Mlp, MlpOutput, MlpSpec};
pub use optim::{AdamConfig, AdamState};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
