//! Inference-time steering of a frozen policy with a verifier.
//!
//! Best-of-N draws candidates from the policy and executes the highest
//! scoring one. Guidance perturbs the clean-sample estimate inside every
//! reverse step by `λ` times the verifier gradient.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::NavEnv;
use crate::error::{CoreError, Result};
use crate::policy::{sample_n_chunks, DiffusionPolicy, NoiseModel};
use crate::rng;
use crate::rollout::{run_episode, ChunkSource, Trajectory, TrajectoryMeta};
use crate::verifier::{Verifier, VerifierKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SteeringMode {
    None,
    /// Highest of `n` candidates; ties go to the lowest index.
    BestOfN { n: usize },
    /// Guided sampling with strength `lambda`; `max_norm` caps the perturbation norm.
    Guidance { lambda: f64, max_norm: Option<f64> },
}

impl SteeringMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SteeringMode::BestOfN { n: 0 } => Err(CoreError::Config("best-of-N needs N >= 1".into())),
            SteeringMode::Guidance { lambda, max_norm } if !(lambda >= 0.0) || max_norm.is_some_and(|m| !(m > 0.0)) => {
                Err(CoreError::Config("guidance needs lambda >= 0 and a positive norm cap".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Defaults used when a steering block leaves values unset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteeringConfig {
    pub best_of_n: usize,
    pub lambda_classifier: f64,
    pub lambda_time_to_success: f64,
    pub max_norm: Option<f64>,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            best_of_n: 30,
            lambda_classifier: 0.1,
            lambda_time_to_success: 0.5,
            max_norm: None,
        }
    }
}

impl SteeringConfig {
    pub fn best_of_n(&self) -> SteeringMode {
        SteeringMode::BestOfN { n: self.best_of_n }
    }

    pub fn guidance(&self, kind: VerifierKind) -> SteeringMode {
        self.guidance_with(match kind {
            VerifierKind::Classifier => self.lambda_classifier,
            VerifierKind::TimeToSuccess => self.lambda_time_to_success,
        })
    }

    pub fn guidance_with(&self, lambda: f64) -> SteeringMode {
        SteeringMode::Guidance {
            lambda,
            max_norm: self.max_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonChoice {
    pub chunk: Vec<f64>,
    pub index: usize,
    pub scores: Vec<f64>,
}

/// Index of the largest score, lowest index on ties. NaN never wins.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Samples `n` candidates with `sample_n_chunks(seed)` and keeps the best.
pub fn bon_select(
    model: &dyn NoiseModel,
    verifier: &dyn Verifier,
    state: &[f64],
    t: usize,
    n: usize,
    seed: u64,
) -> Result<BonChoice> {
    let mut candidates = sample_n_chunks(model, state, n, seed)?;
    let scores = verifier.score(state, t, &candidates)?;
    let index = argmax_first(&scores).ok_or(CoreError::NonFiniteGradient)?;
    debug_assert!(scores.iter().all(|s| s.is_nan() || *s <= scores[index]));
    Ok(BonChoice {
        chunk: candidates.swap_remove(index),
        index,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GuidanceTrace {
    /// Norm of the applied perturbation at steps `K..=1`.
    pub perturbation_norms: Vec<f64>,
}

fn normal_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Guided reverse process. Draws follow `sample_chunk(seed)` exactly, and a
/// step whose perturbation is zero takes the unguided update, so `λ = 0`
/// reproduces the unguided sample bit for bit.
pub fn cg_sample(
    model: &dyn NoiseModel,
    verifier: &dyn Verifier,
    state: &[f64],
    t: usize,
    lambda: f64,
    max_norm: Option<f64>,
    seed: u64,
) -> Result<(Vec<f64>, GuidanceTrace)> {
    SteeringMode::Guidance { lambda, max_norm }.validate()?;
    let d = model.chunk_dim();
    let sched = model.schedule();
    let mut r = rng::rng(seed);
    let mut x = normal_vec(d, &mut r);
    let mut trace = GuidanceTrace::default();
    for k in (1..=sched.steps()).rev() {
        let eps = model.predict_noise(state, &x, k)?;
        let z = if k > 1 { normal_vec(d, &mut r) } else { vec![0.0; d] };
        let delta = if lambda == 0.0 {
            vec![0.0; d]
        } else {
            let x0 = sched.predict_x0(&x, k, &eps)?;
            let g = verifier.score_gradient(state, t, &x0)?;
            let mut delta: Vec<f64> = g.iter().map(|v| lambda * v).collect();
            if let Some(cap) = max_norm {
                let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > cap {
                    delta.iter_mut().for_each(|v| *v *= cap / norm);
                }
            }
            delta
        };
        trace
            .perturbation_norms
            .push(delta.iter().map(|v| v * v).sum::<f64>().sqrt());
        x = if delta.iter().all(|&v| v == 0.0) {
            sched.reverse_step(&x, k, &eps, &z)?
        } else {
            let mut x0 = sched.predict_x0(&x, k, &eps)?;
            x0.iter_mut().zip(&delta).for_each(|(a, b)| *a += b);
            if x0.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFiniteGuidance { step: k });
            }
            let mean = sched.posterior_mean_from_x0(&x, &x0, k)?;
            let sigma = sched.sigma(k);
            mean.iter().zip(&z).map(|(m, zv)| m + sigma * zv).collect()
        };
    }
    Ok((x, trace))
}

/// Per-chunk steering record for diagnostics logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkDiagnostic {
    pub t: usize,
    pub state: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate_scores: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perturbation_norms: Option<Vec<f64>>,
}

/// A policy paired with a verifier and a steering mode.
pub struct SteeredPolicy<'a> {
    policy: &'a DiffusionPolicy,
    verifier: Option<&'a dyn Verifier>,
    mode: SteeringMode,
    diagnostics: Option<Mutex<BTreeMap<u64, ChunkDiagnostic>>>,
}

impl<'a> SteeredPolicy<'a> {
    pub fn new(policy: &'a DiffusionPolicy, verifier: Option<&'a dyn Verifier>, mode: SteeringMode) -> Result<Self> {
        mode.validate()?;
        if mode != SteeringMode::None && verifier.is_none() {
            return Err(CoreError::Config("steering requires a verifier".into()));
        }
        Ok(Self {
            policy,
            verifier,
            mode,
            diagnostics: None,
        })
    }

    /// Records a diagnostic per chunk, keyed by the chunk's seed.
    pub fn with_diagnostics(mut self) -> Self {
        self.diagnostics = Some(Mutex::new(BTreeMap::new()));
        self
    }

    pub fn mode(&self) -> SteeringMode {
        self.mode
    }

    /// Collected diagnostics keyed by chunk seed.
    pub fn take_diagnostics(&self) -> BTreeMap<u64, ChunkDiagnostic> {
        self.diagnostics
            .as_ref()
            .map(|m| std::mem::take(&mut *m.lock().expect("diagnostics lock")))
            .unwrap_or_default()
    }

    fn record(&self, seed: u64, d: ChunkDiagnostic) {
        if let Some(m) = &self.diagnostics {
            m.lock().expect("diagnostics lock").insert(seed, d);
        }
    }
}

impl ChunkSource for SteeredPolicy<'_> {
    fn chunk_len(&self) -> usize {
        self.policy.spec().chunk_len
    }

    fn action_dim(&self) -> usize {
        self.policy.spec().action_dim
    }

    fn choose(&self, obs: &[f64], t: usize, seed: u64) -> Result<Vec<f64>> {
        match (self.mode, self.verifier) {
            (SteeringMode::BestOfN { n }, Some(v)) => {
                let choice = bon_select(self.policy, v, obs, t, n, seed)?;
                self.record(
                    seed,
                    ChunkDiagnostic {
                        t,
                        state: obs.to_vec(),
                        candidate_scores: Some(choice.scores),
                        selected: Some(choice.index),
                        perturbation_norms: None,
                    },
                );
                Ok(choice.chunk)
            }
            (SteeringMode::Guidance { lambda, max_norm }, Some(v)) => {
                let (chunk, trace) = cg_sample(self.policy, v, obs, t, lambda, max_norm, rng::substream(seed, 0))?;
                self.record(
                    seed,
                    ChunkDiagnostic {
                        t,
                        state: obs.to_vec(),
                        candidate_scores: None,
                        selected: None,
                        perturbation_norms: Some(trace.perturbation_norms),
                    },
                );
                Ok(chunk)
            }
            _ => self.policy.choose(obs, t, seed),
        }
    }
}

/// One episode under `mode`; chunk seeds match the unsteered policy's.
pub fn steered_rollout(
    policy: &DiffusionPolicy,
    verifier: Option<&dyn Verifier>,
    env: &NavEnv,
    mode: SteeringMode,
    seed: u64,
) -> Result<Trajectory> {
    let steered = SteeredPolicy::new(policy, verifier, mode)?;
    run_episode(
        &steered,
        env,
        seed,
        TrajectoryMeta {
            policy: policy.digest().to_string(),
            seed,
            episode: 0,
        },
    )
}
