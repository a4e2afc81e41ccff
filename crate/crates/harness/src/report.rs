//! Evaluation reports.

use std::path::Path;

use serde::{Deserialize, Serialize};
use veristeer_core::{NavEnv, Outcome, RolloutDataset, SteeringMode, VerifierKind};

use crate::error::{HarnessError, Result};

/// Binomial standard error of a success rate, in percentage points.
pub fn standard_error(successes: usize, episodes: usize) -> f64 {
    if episodes == 0 {
        return 0.0;
    }
    let p = successes as f64 / episodes as f64;
    100.0 * (p * (1.0 - p) / episodes as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub seed: u64,
    pub success: bool,
    pub outcome: Outcome,
    pub chunks: usize,
    /// Door the agent passed through, if it crossed the wall.
    pub door: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub mode: SteeringMode,
    pub verifier: Option<VerifierKind>,
    pub episodes: usize,
    pub successes: usize,
    /// Percent.
    pub success_rate: f64,
    /// Percent.
    pub standard_error: f64,
    pub seed: u64,
    pub policy: String,
    /// Policy whose rollouts trained the verifier.
    pub verifier_source: Option<String>,
    /// Whether the verifier was trained on this policy's own rollouts.
    pub on_policy: Option<bool>,
    pub config_hash: String,
    pub outcomes: Vec<EpisodeRecord>,
}

/// Fields of a report that are not derived from the rollouts.
#[derive(Debug, Clone)]
pub struct ReportContext {
    pub label: String,
    pub mode: SteeringMode,
    pub verifier: Option<VerifierKind>,
    pub seed: u64,
    pub policy: String,
    pub verifier_source: Option<String>,
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(ctx: ReportContext, env: &NavEnv, rollouts: &RolloutDataset) -> Self {
        let outcomes: Vec<EpisodeRecord> = rollouts
            .trajectories
            .iter()
            .map(|t| EpisodeRecord {
                episode: t.meta.episode,
                seed: t.meta.seed,
                success: t.success,
                outcome: t.outcome,
                chunks: t.len(),
                door: env.crossing_door(&t.path),
            })
            .collect();
        let episodes = outcomes.len();
        let successes = outcomes.iter().filter(|o| o.success).count();
        let on_policy = ctx.verifier_source.as_ref().map(|s| *s == ctx.policy);
        Self {
            label: ctx.label,
            mode: ctx.mode,
            verifier: ctx.verifier,
            episodes,
            successes,
            success_rate: if episodes == 0 {
                0.0
            } else {
                100.0 * successes as f64 / episodes as f64
            },
            standard_error: standard_error(successes, episodes),
            seed: ctx.seed,
            policy: ctx.policy,
            verifier_source: ctx.verifier_source,
            on_policy,
            config_hash: ctx.config_hash,
            outcomes,
        }
    }

    /// Episodes per door index; the last slot counts episodes that never crossed.
    pub fn door_counts(&self, doors: usize) -> Vec<usize> {
        let mut counts = vec![0; doors + 1];
        for o in &self.outcomes {
            counts[o.door.unwrap_or(doors).min(doors)] += 1;
        }
        counts
    }

    pub fn summary(&self) -> String {
        let flag = match self.on_policy {
            Some(false) => " [off-policy verifier]",
            _ => "",
        };
        format!(
            "{:<24} {:6.1}% ± {:4.1}  ({}/{}){flag}",
            self.label, self.success_rate, self.standard_error, self.successes, self.episodes
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
