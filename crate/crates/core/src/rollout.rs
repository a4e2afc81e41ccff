//! Labelled rollouts: storage, persistence, splitting and contrastive pairing.
//!
//! Actions are stored in policy units, i.e. velocities divided by the
//! environment speed cap, flattened row-major as `chunk_len × action_dim`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::env::{NavEnv, Outcome};
use crate::error::{CoreError, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    /// Chunk index within the episode.
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    /// Digest of the policy checkpoint that produced the rollout; empty for demos.
    pub policy: String,
    pub seed: u64,
    pub episode: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub success: bool,
    /// Index of the chunk during which the goal was reached.
    pub success_step: Option<usize>,
    pub outcome: Outcome,
    /// Agent position after every environment step, starting at reset.
    pub path: Vec<[f64; 2]>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn label(&self) -> f64 {
        if self.success {
            1.0
        } else {
            0.0
        }
    }

    /// Checks the structural invariants: contiguous chunk indices from zero,
    /// label consistent with outcome, and `T` equal to the last index on success.
    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(CoreError::Record { line: 0, reason: r });
        if self.transitions.is_empty() {
            return bad("trajectory has no transitions".into());
        }
        if let Some(i) = self.transitions.iter().enumerate().position(|(i, tr)| tr.t != i) {
            return bad(format!("transition {i} is out of order"));
        }
        if self.success != (self.outcome == Outcome::Success) {
            return bad("success flag disagrees with outcome".into());
        }
        match (self.success, self.success_step) {
            (true, Some(t)) if t + 1 == self.transitions.len() => Ok(()),
            (false, None) => Ok(()),
            _ => bad("success step inconsistent with label".into()),
        }
    }
}

/// Binary success label of a finished trajectory.
pub fn is_success(trajectory: &Trajectory) -> Result<bool> {
    if trajectory.outcome == Outcome::Running {
        return Err(CoreError::NotTerminal);
    }
    Ok(trajectory.outcome == Outcome::Success)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutDataset {
    pub trajectories: Vec<Trajectory>,
}

impl RolloutDataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        Self { trajectories }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn successes(&self) -> usize {
        self.trajectories.iter().filter(|t| t.success).count()
    }

    pub fn success_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.successes() as f64 / self.len() as f64
    }

    pub fn transition_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// One JSON record per line, in trajectory order.
    pub fn write_jsonl(&self, writer: impl Write) -> Result<()> {
        let mut w = BufWriter::new(writer);
        for t in &self.trajectories {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut trajectories = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Trajectory = serde_json::from_str(&line).map_err(|e| CoreError::Record {
                line: i + 1,
                reason: e.to_string(),
            })?;
            t.validate().map_err(|e| match e {
                CoreError::Record { reason, .. } => CoreError::Record { line: i + 1, reason },
                other => other,
            })?;
            trajectories.push(t);
        }
        Ok(Self { trajectories })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_jsonl(File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(BufReader::new(File::open(path)?))
    }

    /// Trajectory-level split stratified by label. Within each class the
    /// train share is rounded and then clamped so that both sides keep at
    /// least one member whenever the class has two or more.
    pub fn split_by_trajectory(&self, fraction: f64, seed: u64) -> Result<Split> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(CoreError::Config(format!("split fraction {fraction} outside (0, 1)")));
        }
        if self.len() < 2 {
            return Err(CoreError::Empty("splitting needs at least two trajectories"));
        }
        let mut r = rng::rng(seed);
        let mut split = Split::default();
        for class in [true, false] {
            let mut ids: Vec<usize> = (0..self.len())
                .filter(|&i| self.trajectories[i].success == class)
                .collect();
            if ids.is_empty() {
                continue;
            }
            ids.shuffle(&mut r);
            let n = ids.len();
            let mut k = (fraction * n as f64).round() as usize;
            if n >= 2 {
                k = k.clamp(1, n - 1);
            }
            split.train.extend_from_slice(&ids[..k]);
            split.val.extend_from_slice(&ids[k..]);
        }
        split.train.sort_unstable();
        split.val.sort_unstable();
        Ok(split)
    }
}

/// Chooses the next action chunk (policy units) for an observation.
pub trait ChunkSource: Sync {
    fn chunk_len(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// `t` is the chunk index within the episode; `seed` is that chunk's stream.
    fn choose(&self, obs: &[f64], t: usize, seed: u64) -> Result<Vec<f64>>;
}

/// Runs one episode, executing every chunk open-loop until the episode ends.
/// Chunk `t` draws from `substream(seed, t)`.
pub fn run_episode(
    source: &dyn ChunkSource,
    env: &NavEnv,
    seed: u64,
    meta: TrajectoryMeta,
) -> Result<Trajectory> {
    let (n, a) = (source.chunk_len(), source.action_dim());
    if a != 2 {
        return Err(CoreError::Shape(format!("navigation actions are 2-D, policy emits {a}")));
    }
    let cap = env.config().speed_cap;
    let mut state = env.reset();
    let mut path = vec![state.position];
    let mut transitions = Vec::new();
    while !state.is_terminal() {
        let t = transitions.len();
        let obs = state.position.to_vec();
        let action = source.choose(&obs, t, rng::substream(seed, t as u64))?;
        if action.len() != n * a {
            return Err(CoreError::Shape(format!("chunk of {} values, expected {}", action.len(), n * a)));
        }
        for v in action.chunks(2) {
            state = env.step(&state, [v[0] * cap, v[1] * cap])?;
            path.push(state.position);
            if state.is_terminal() {
                break;
            }
        }
        transitions.push(Transition { state: obs, action, t });
    }
    let success = state.outcome == Outcome::Success;
    Ok(Trajectory {
        success_step: success.then(|| transitions.len() - 1),
        transitions,
        success,
        outcome: state.outcome,
        path,
        meta,
    })
}

/// `count` episodes in parallel; episode `i` uses `substream(seed, i)` and the
/// dataset is ordered by episode index.
pub fn collect_rollouts(
    source: &dyn ChunkSource,
    env: &NavEnv,
    count: usize,
    seed: u64,
    policy_digest: &str,
) -> Result<RolloutDataset> {
    if count == 0 {
        return Err(CoreError::Config("rollout count must be at least 1".into()));
    }
    let trajectories = (0..count)
        .into_par_iter()
        .map(|i| {
            let episode_seed = rng::substream(seed, i as u64);
            let meta = TrajectoryMeta {
                policy: policy_digest.to_string(),
                seed: episode_seed,
                episode: i,
            };
            run_episode(source, env, episode_seed, meta)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutDataset::new(trajectories))
}

/// Address of one transition inside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TransitionRef {
    pub trajectory: usize,
    pub step: usize,
}

/// Draws opposite-class partners: a uniformly random trajectory of the other
/// label, then a uniformly random chunk index within it.
#[derive(Debug, Clone)]
pub struct ContrastiveSampler {
    positives: Vec<usize>,
    negatives: Vec<usize>,
    lengths: Vec<usize>,
}

impl ContrastiveSampler {
    /// Builds a sampler over the trajectories listed in `ids`.
    pub fn new(dataset: &RolloutDataset, ids: &[usize]) -> Result<Self> {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for &i in ids {
            let t = dataset.trajectories.get(i).ok_or(CoreError::TransitionIndex {
                index: i,
                len: dataset.len(),
            })?;
            if t.is_empty() {
                continue;
            }
            if t.success {
                positives.push(i);
            } else {
                negatives.push(i);
            }
        }
        if positives.is_empty() || negatives.is_empty() {
            return Err(CoreError::SingleClass);
        }
        let lengths = dataset.trajectories.iter().map(Trajectory::len).collect();
        Ok(Self {
            positives,
            negatives,
            lengths,
        })
    }

    /// Partner for an anchor with the given label.
    pub fn partner<R: Rng + ?Sized>(&self, anchor_success: bool, rng: &mut R) -> TransitionRef {
        let pool = if anchor_success {
            &self.negatives
        } else {
            &self.positives
        };
        let trajectory = pool[rng.random_range(0..pool.len())];
        let step = rng.random_range(0..self.lengths[trajectory]);
        TransitionRef { trajectory, step }
    }

    /// `batch` pairs `(positive, negative)`. Anchors alternate between a
    /// random positive and a random negative; each gets a fresh partner.
    pub fn sample_pairs<R: Rng + ?Sized>(
        &self,
        batch: usize,
        rng: &mut R,
    ) -> Vec<(TransitionRef, TransitionRef)> {
        (0..batch)
            .map(|i| {
                let anchor_success = i % 2 == 0;
                let pool = if anchor_success {
                    &self.positives
                } else {
                    &self.negatives
                };
                let trajectory = pool[rng.random_range(0..pool.len())];
                let anchor = TransitionRef {
                    trajectory,
                    step: rng.random_range(0..self.lengths[trajectory]),
                };
                let partner = self.partner(anchor_success, rng);
                if anchor_success {
                    (anchor, partner)
                } else {
                    (partner, anchor)
                }
            })
            .collect()
    }
}
