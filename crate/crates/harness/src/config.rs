//! Experiment configuration.
//!
//! One TOML file describes a whole run. Every stochastic stage draws its seed
//! from the root `seed` through a labelled substream, so `seed` fields inside
//! the policy and verifier tables are ignored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use veristeer_core::{
    rng, DemoConfig, EnvConfig, NavEnv, PolicyArch, PolicyTrainConfig, SteeringConfig, SteeringMode, VerifierKind,
    VerifierTrainConfig,
};
use veristeer_nn::hex_digest;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct PolicyConfig {
    pub arch: PolicyArch,
    pub train: PolicyTrainConfig,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    /// Episodes collected to train the verifiers.
    pub collect: usize,
    /// Paired-seed episodes per evaluation.
    pub eval: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            collect: 1000,
            eval: 1000,
        }
    }
}

/// Guidance strengths tried by `eval --sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub classifier: Vec<f64>,
    pub time_to_success: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            classifier: vec![0.03, 0.3],
            time_to_success: vec![1.0, 2.0],
        }
    }
}

impl SweepConfig {
    pub fn lambdas(&self, kind: VerifierKind) -> &[f64] {
        match kind {
            VerifierKind::Classifier => &self.classifier,
            VerifierKind::TimeToSuccess => &self.time_to_success,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotConfig {
    /// Cells per side of the verifier landscape.
    pub grid: usize,
    /// Trajectories drawn per evaluation plot.
    pub trajectories: usize,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            grid: 50,
            trajectories: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    pub demos: DemoConfig,
    pub policy: PolicyConfig,
    pub rollouts: RolloutConfig,
    pub verifier: VerifierTrainConfig,
    pub steering: SteeringConfig,
    pub sweep: SweepConfig,
    pub plots: PlotConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            env: EnvConfig::default(),
            demos: DemoConfig::default(),
            policy: PolicyConfig::default(),
            rollouts: RolloutConfig::default(),
            verifier: VerifierTrainConfig::default(),
            steering: SteeringConfig::default(),
            sweep: SweepConfig::default(),
            plots: PlotConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_value(toml::from_str(text)?)
    }

    /// Parses a TOML table after applying `section.key=value` overrides.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = toml::from_str(text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    fn from_value(value: toml::Table) -> Result<Self> {
        let config: Self = value.try_into()?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| HarnessError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        NavEnv::new(self.env.clone())?;
        if self.demos.count == 0 {
            return bad("demos.count must be positive".into());
        }
        if self.demos.chunk_len != self.policy.arch.chunk_len {
            return bad(format!(
                "demo chunk length {} differs from policy chunk length {}",
                self.demos.chunk_len, self.policy.arch.chunk_len
            ));
        }
        if self.rollouts.collect < 2 || self.rollouts.eval == 0 {
            return bad("rollouts.collect must be at least 2 and rollouts.eval positive".into());
        }
        if !(self.verifier.split_fraction > 0.0 && self.verifier.split_fraction < 1.0) {
            return bad("verifier.split_fraction must lie in (0, 1)".into());
        }
        self.steering.best_of_n().validate()?;
        for kind in [VerifierKind::Classifier, VerifierKind::TimeToSuccess] {
            self.steering.guidance(kind).validate()?;
            for &l in self.sweep.lambdas(kind) {
                self.steering.guidance_with(l).validate()?;
            }
        }
        if self.plots.grid < 2 {
            return bad("plots.grid must be at least 2".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hex_digest(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn seed_for(&self, label: &str) -> u64 {
        rng::derive(self.seed, label)
    }

    pub fn policy_train(&self) -> PolicyTrainConfig {
        PolicyTrainConfig {
            seed: self.seed_for("train-policy"),
            ..self.policy.train.clone()
        }
    }

    pub fn verifier_train(&self, kind: VerifierKind) -> VerifierTrainConfig {
        VerifierTrainConfig {
            seed: self.seed_for(&format!("train-verifier/{}", kind.name())),
            ..self.verifier.clone()
        }
    }

    pub fn env(&self) -> Result<NavEnv> {
        Ok(NavEnv::new(self.env.clone())?)
    }

    /// The four steered evaluations in pipeline order.
    pub fn steering_runs(&self) -> [(VerifierKind, SteeringMode); 4] {
        let s = &self.steering;
        [
            (VerifierKind::Classifier, s.best_of_n()),
            (VerifierKind::TimeToSuccess, s.best_of_n()),
            (VerifierKind::Classifier, s.guidance(VerifierKind::Classifier)),
            (VerifierKind::TimeToSuccess, s.guidance(VerifierKind::TimeToSuccess)),
        ]
    }
}

/// Sets `a.b.c = value`; the value is read as a TOML literal, or as a string
/// if that fails.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
