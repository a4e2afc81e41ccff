//! Multi-layer perceptron blocks: `linear -> [layer norm] -> activation`,
//! with optional dropout in front of the final layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
    pub layer_norm: bool,
}

impl LayerSpec {
    pub fn relu(width: usize) -> Self {
        Self {
            width,
            activation: Activation::Relu,
            layer_norm: false,
        }
    }

    pub fn norm_relu(width: usize) -> Self {
        Self {
            width,
            activation: Activation::Relu,
            layer_norm: true,
        }
    }

    pub fn linear(width: usize) -> Self {
        Self {
            width,
            activation: Activation::Identity,
            layer_norm: false,
        }
    }
}

/// Layer widths and per-layer options. `dropout` is applied to the input of
/// the final layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub dropout: f64,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(NnError::InvalidSpec("input_dim must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(NnError::InvalidSpec("at least one layer required".into()));
        }
        if let Some(i) = self.layers.iter().position(|l| l.width == 0) {
            return Err(NnError::InvalidSpec(format!("layer {i} has zero width")));
        }
        if let Some(i) = self.layers.iter().position(|l| l.layer_norm && l.width < 2) {
            return Err(NnError::InvalidSpec(format!(
                "layer {i}: layer norm needs width >= 2"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::InvalidSpec(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.width).unwrap_or(self.input_dim)
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    weight: ParamId,
    bias: ParamId,
    norm: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<LayerParams>,
}

pub struct MlpOutput {
    pub output: Var,
    /// Activation feeding the final layer (before dropout).
    pub features: Var,
}

impl Mlp {
    /// Registers parameters under `prefix` with uniform ±sqrt(1/fan_in) init.
    pub fn new<R: Rng>(
        spec: MlpSpec,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut fan_in = spec.input_dim;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, l) in spec.layers.iter().enumerate() {
            let bound = (1.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * l.width)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let b: Vec<f64> = (0..l.width)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let weight = store.add(format!("{prefix}.{i}.weight"), Tensor::matrix(fan_in, l.width, w)?);
            let bias = store.add(format!("{prefix}.{i}.bias"), Tensor::vector(b));
            let norm = l.layer_norm.then(|| {
                (
                    store.add(format!("{prefix}.{i}.ln_gamma"), Tensor::filled(&[l.width], 1.0)),
                    store.add(format!("{prefix}.{i}.ln_beta"), Tensor::zeros(&[l.width])),
                )
            });
            layers.push(LayerParams { weight, bias, norm });
            fan_in = l.width;
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<MlpOutput> {
        let got = g.value(x).cols();
        if got != self.spec.input_dim {
            return Err(NnError::LayerInput {
                layer: 0,
                expected: self.spec.input_dim,
                got,
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        let mut features = x;
        for (i, (lp, ls)) in self.layers.iter().zip(&self.spec.layers).enumerate() {
            if i == last {
                features = h;
                h = g.dropout(h, self.spec.dropout)?;
            }
            h = g.linear(h, lp.weight, lp.bias)?;
            if let Some((gamma, beta)) = lp.norm {
                h = g.layer_norm(h, gamma, beta)?;
            }
            if ls.activation == Activation::Relu {
                h = g.relu(h)?;
            }
        }
        Ok(MlpOutput {
            output: h,
            features,
        })
    }
}
