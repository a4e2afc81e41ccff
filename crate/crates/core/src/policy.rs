//! Action-chunked DDPM behaviour-cloning policy.
//!
//! The noise predictor is a ReLU MLP over `[noisy chunk, normalized
//! observation, step embedding]`. Its first layer is stored as three weight
//! blocks so that sampling can precompute the embedding term for every
//! diffusion step once per parameter set.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;
use veristeer_nn::{
    sinusoidal_embedding, AdamConfig, AdamState, Checkpoint, Graph, ParamId, ParamStore, Tensor, Var,
};

use crate::error::{CoreError, Result};
use crate::rng;
use crate::rollout::{ChunkSource, Trajectory};
use crate::schedule::{NoiseSchedule, ScheduleParams};

pub const CHECKPOINT_KIND: &str = "diffusion_policy";

/// Per-dimension affine standardization of observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits mean and std over `rows`; near-constant dimensions keep unit scale.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            if r.len() != dim {
                return Err(CoreError::Shape(format!("observation of length {} expected {dim}", r.len())));
            }
            n += 1;
            for (i, v) in r.iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        if n == 0 {
            return Err(CoreError::Empty("no observations to normalize"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / n as f64 - m * m).max(0.0).sqrt();
                if sd < 1e-6 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Everything needed to rebuild a policy from its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub chunk_len: usize,
    pub hidden: usize,
    pub time_embed_dim: usize,
    pub schedule: ScheduleParams,
    pub normalizer: Normalizer,
}

impl PolicySpec {
    pub fn chunk_dim(&self) -> usize {
        self.chunk_len * self.action_dim
    }

    fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.action_dim == 0 || self.chunk_len == 0 || self.hidden == 0 {
            return Err(CoreError::Config("policy dimensions must be positive".into()));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(CoreError::Config("time embedding dimension must be even and positive".into()));
        }
        if self.normalizer.dim() != self.obs_dim || self.normalizer.std.len() != self.obs_dim {
            return Err(CoreError::Config("normalizer dimension differs from obs_dim".into()));
        }
        Ok(())
    }
}

/// Network shape choices that are not fitted from data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyArch {
    pub chunk_len: usize,
    pub hidden: usize,
    pub time_embed_dim: usize,
    pub schedule: ScheduleParams,
}

impl Default for PolicyArch {
    fn default() -> Self {
        Self {
            chunk_len: 8,
            hidden: 256,
            time_embed_dim: 64,
            schedule: ScheduleParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Chunks drawn at the probe state for the spread statistic.
    pub variance_samples: usize,
    /// Training stops once the mean per-dimension std falls below this.
    pub variance_floor: f64,
    /// Epoch interval between spread measurements.
    pub monitor_every: usize,
    pub lr_decay: LrDecay,
}

/// Learning-rate schedule over the planned number of optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to zero.
    Cosine,
}

impl LrDecay {
    pub fn factor(self, step: u64, total: u64) -> f64 {
        match self {
            LrDecay::Constant => 1.0,
            LrDecay::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
            variance_samples: 32,
            variance_floor: 1e-3,
            monitor_every: 10,
            lr_decay: LrDecay::Constant,
        }
    }
}

impl PolicyTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.variance_samples < 2 || self.monitor_every == 0 {
            return Err(CoreError::Config(
                "epochs, batch size and monitor interval must be positive, with at least two variance samples"
                    .into(),
            ));
        }
        if !(self.variance_floor > 0.0) || !(self.lr > 0.0) {
            return Err(CoreError::Config("variance floor and learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyTrainReport {
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    /// `(epoch, mean per-dimension std)` at the probe state.
    pub spread: Vec<(usize, f64)>,
    pub early_stopped: bool,
    pub steps: u64,
}

/// One supervised pair: raw observation and the chunk taken from it.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub obs: Vec<f64>,
    pub chunk: Vec<f64>,
}

/// Anything that predicts DDPM noise for a batch of chunks sharing one observation.
pub trait NoiseModel: Sync {
    fn chunk_dim(&self) -> usize;
    fn schedule(&self) -> &NoiseSchedule;
    /// `noisy` holds `rows × chunk_dim` values; returns the same layout.
    fn predict_noise(&self, obs: &[f64], noisy: &[f64], k: usize) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy)]
struct PredictorParams {
    in_chunk: ParamId,
    in_obs: ParamId,
    in_step: ParamId,
    bias0: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct DiffusionPolicy {
    spec: PolicySpec,
    schedule: NoiseSchedule,
    store: ParamStore,
    ids: PredictorParams,
    /// Step embedding times its weight block plus the first bias, per step.
    step_terms: Vec<Tensor>,
    embeddings: Vec<Vec<f64>>,
    digest: String,
}

fn uniform_tensor<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Result<Tensor> {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Ok(Tensor::matrix(rows, cols, data)?)
}

fn uniform_bias<R: Rng>(n: usize, bound: f64, rng: &mut R) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

impl DiffusionPolicy {
    /// Freshly initialized predictor.
    pub fn new(spec: PolicySpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let schedule = NoiseSchedule::linear(spec.schedule)?;
        let mut r = rng::rng(seed);
        let (d, o, e, h) = (spec.chunk_dim(), spec.obs_dim, spec.time_embed_dim, spec.hidden);
        let b0 = (1.0 / (d + o + e) as f64).sqrt();
        let bh = (1.0 / h as f64).sqrt();
        let mut store = ParamStore::new();
        let ids = PredictorParams {
            in_chunk: store.add("eps.0.chunk_weight", uniform_tensor(d, h, b0, &mut r)?),
            in_obs: store.add("eps.0.obs_weight", uniform_tensor(o, h, b0, &mut r)?),
            in_step: store.add("eps.0.step_weight", uniform_tensor(e, h, b0, &mut r)?),
            bias0: store.add("eps.0.bias", uniform_bias(h, b0, &mut r)),
            w1: store.add("eps.1.weight", uniform_tensor(h, h, bh, &mut r)?),
            b1: store.add("eps.1.bias", uniform_bias(h, bh, &mut r)),
            w2: store.add("eps.2.weight", uniform_tensor(h, d, bh, &mut r)?),
            b2: store.add("eps.2.bias", uniform_bias(d, bh, &mut r)),
        };
        let embeddings = (1..=schedule.steps())
            .map(|k| sinusoidal_embedding(k as f64, e))
            .collect::<std::result::Result<_, _>>()?;
        let mut policy = Self {
            spec,
            schedule,
            store,
            ids,
            step_terms: Vec::new(),
            embeddings,
            digest: String::new(),
        };
        policy.refresh()?;
        Ok(policy)
    }

    /// Recomputes cached terms and the checkpoint digest after a parameter change.
    fn refresh(&mut self) -> Result<()> {
        let w = self.store.get(self.ids.in_step);
        let b = self.store.get(self.ids.bias0).data();
        self.step_terms = self
            .embeddings
            .iter()
            .map(|emb| {
                let mut t = Tensor::row(emb.clone()).matmul(w)?;
                t.data_mut().iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
                Ok(t)
            })
            .collect::<Result<_>>()?;
        self.digest = self.checkpoint()?.digest()?;
        Ok(())
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// SHA-256 of the serialized checkpoint; identifies the policy in rollout metadata.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn embedding(&self, k: usize) -> &[f64] {
        &self.embeddings[k - 1]
    }

    /// Builds the predictor on `g`. Inputs are `[B, chunk_dim]`, `[B, obs_dim]`
    /// (already normalized) and `[B, time_embed_dim]`.
    pub fn forward_graph(&self, g: &mut Graph, noisy: Var, obs: Var, emb: Var) -> Result<Var> {
        let p = self.ids;
        let wc = g.param(p.in_chunk);
        let wo = g.param(p.in_obs);
        let we = g.param(p.in_step);
        let b0 = g.param(p.bias0);
        let a = g.matmul(noisy, wc)?;
        let b = g.matmul(obs, wo)?;
        let c = g.matmul(emb, we)?;
        let h = g.add(a, b)?;
        let h = g.add(h, c)?;
        let h = g.add_bias(h, b0)?;
        let h = g.relu(h)?;
        let h = g.linear(h, p.w1, p.b1)?;
        let h = g.relu(h)?;
        Ok(g.linear(h, p.w2, p.b2)?)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(CHECKPOINT_KIND, &self.spec, json!({}), self.store.clone())?)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(CoreError::Config(format!("checkpoint kind `{}` is not a policy", ckpt.kind)));
        }
        let spec: PolicySpec = serde_json::from_value(ckpt.spec.clone())?;
        let mut policy = Self::new(spec, 0)?;
        ckpt.load_params_into(&mut policy.store)?;
        policy.refresh()?;
        Ok(policy)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(self.checkpoint()?.save(path)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl NoiseModel for DiffusionPolicy {
    fn chunk_dim(&self) -> usize {
        self.spec.chunk_dim()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_noise(&self, obs: &[f64], noisy: &[f64], k: usize) -> Result<Vec<f64>> {
        let d = self.spec.chunk_dim();
        if obs.len() != self.spec.obs_dim || noisy.is_empty() || !noisy.len().is_multiple_of(d) {
            return Err(CoreError::Shape(format!(
                "predictor expects obs {} and rows of {d}, got obs {} and {} values",
                self.spec.obs_dim,
                obs.len(),
                noisy.len()
            )));
        }
        if k == 0 || k > self.schedule.steps() {
            return Err(CoreError::DiffusionStep {
                step: k,
                max: self.schedule.steps(),
            });
        }
        let rows = noisy.len() / d;
        let s = &self.store;
        let obs_term = Tensor::row(self.spec.normalizer.apply(obs)).matmul(s.get(self.ids.in_obs))?;
        let mut h = Tensor::matrix(rows, d, noisy.to_vec())?.matmul(s.get(self.ids.in_chunk))?;
        let step = self.step_terms[k - 1].data();
        let hidden = self.spec.hidden;
        for r in 0..rows {
            let row = &mut h.data_mut()[r * hidden..(r + 1) * hidden];
            for ((v, o), e) in row.iter_mut().zip(obs_term.data()).zip(step) {
                *v = (*v + o + e).max(0.0);
            }
        }
        let mut h = h.matmul(s.get(self.ids.w1))?;
        add_rows(&mut h, s.get(self.ids.b1).data(), true);
        let mut out = h.matmul(s.get(self.ids.w2))?;
        add_rows(&mut out, s.get(self.ids.b2).data(), false);
        Ok(out.into_data())
    }
}

/// Unsteered execution: each chunk is candidate 0 of `sample_n_chunks`.
impl ChunkSource for DiffusionPolicy {
    fn chunk_len(&self) -> usize {
        self.spec.chunk_len
    }

    fn action_dim(&self) -> usize {
        self.spec.action_dim
    }

    fn choose(&self, obs: &[f64], _t: usize, seed: u64) -> Result<Vec<f64>> {
        Ok(sample_n_chunks(self, obs, 1, seed)?.remove(0))
    }
}

fn add_rows(x: &mut Tensor, bias: &[f64], relu: bool) {
    let n = bias.len();
    for row in x.data_mut().chunks_mut(n) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
            if relu {
                *v = v.max(0.0);
            }
        }
    }
}

fn normal_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Runs the reverse process for one chunk per generator. Each generator
/// supplies the initial draw and then one noise vector per step `k > 1`.
pub fn sample_with_rngs(model: &dyn NoiseModel, obs: &[f64], rngs: &mut [ChaCha8Rng]) -> Result<Vec<Vec<f64>>> {
    let d = model.chunk_dim();
    let sched = model.schedule();
    let mut x: Vec<f64> = rngs.iter_mut().flat_map(|r| normal_vec(d, r)).collect();
    let zeros = vec![0.0; d];
    for k in (1..=sched.steps()).rev() {
        let eps = model.predict_noise(obs, &x, k)?;
        let mut next = Vec::with_capacity(x.len());
        for (i, r) in rngs.iter_mut().enumerate() {
            let z = if k > 1 { normal_vec(d, r) } else { zeros.clone() };
            next.extend(sched.reverse_step(&x[i * d..(i + 1) * d], k, &eps[i * d..(i + 1) * d], &z)?);
        }
        x = next;
    }
    Ok(x.chunks(d).map(<[f64]>::to_vec).collect())
}

/// One chunk from the reverse process seeded by `seed`.
pub fn sample_chunk(model: &dyn NoiseModel, obs: &[f64], seed: u64) -> Result<Vec<f64>> {
    let mut rngs = [rng::rng(seed)];
    Ok(sample_with_rngs(model, obs, &mut rngs)?.remove(0))
}

/// `n` independent chunks; candidate `i` uses substream `i` of `seed`.
pub fn sample_n_chunks(model: &dyn NoiseModel, obs: &[f64], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(CoreError::Config("candidate count must be at least 1".into()));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..n as u64).map(|i| rng::rng(rng::substream(seed, i))).collect();
    sample_with_rngs(model, obs, &mut rngs)
}

/// Mean over chunk dimensions of the sample std across `n` draws at `obs`.
pub fn sample_spread(model: &dyn NoiseModel, obs: &[f64], n: usize, seed: u64) -> Result<f64> {
    let chunks = sample_n_chunks(model, obs, n, seed)?;
    Ok(per_dim_std(&chunks).iter().sum::<f64>() / model.chunk_dim() as f64)
}

pub fn per_dim_std(chunks: &[Vec<f64>]) -> Vec<f64> {
    let n = chunks.len() as f64;
    let d = chunks.first().map_or(0, Vec::len);
    (0..d)
        .map(|j| {
            let m = chunks.iter().map(|c| c[j]).sum::<f64>() / n;
            (chunks.iter().map(|c| (c[j] - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
        })
        .collect()
}

/// Mean pairwise L2 distance between chunks.
pub fn mean_pairwise_distance(chunks: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..chunks.len() {
        for j in i + 1..chunks.len() {
            total += chunks[i]
                .iter()
                .zip(&chunks[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Per-step training pairs from demos: a window starting at every executed
/// step, padded with the final action where it runs past the end.
pub fn demo_samples(demos: &[Trajectory], chunk_len: usize, action_dim: usize) -> Result<Vec<PolicySample>> {
    let mut out = Vec::new();
    for demo in demos {
        let steps = demo.path.len().saturating_sub(1);
        let actions: Vec<&[f64]> = demo
            .transitions
            .iter()
            .flat_map(|t| t.action.chunks(action_dim))
            .take(steps)
            .collect();
        if actions.len() != steps || steps == 0 {
            return Err(CoreError::Shape(format!(
                "demo {} has {} actions for {steps} steps",
                demo.meta.episode,
                actions.len()
            )));
        }
        for i in 0..steps {
            let chunk = (0..chunk_len)
                .flat_map(|j| actions[(i + j).min(steps - 1)].iter().copied())
                .collect();
            out.push(PolicySample {
                obs: demo.path[i].to_vec(),
                chunk,
            });
        }
    }
    Ok(out)
}

/// Trains a policy on expert demos; the probe state is the first demo's start.
pub fn train_policy(
    demos: &[Trajectory],
    arch: &PolicyArch,
    config: &PolicyTrainConfig,
) -> Result<(DiffusionPolicy, PolicyTrainReport)> {
    let first = demos.first().ok_or(CoreError::Empty("no demos"))?;
    let obs_dim = first.path[0].len();
    let action_dim = 2;
    let samples = demo_samples(demos, arch.chunk_len, action_dim)?;
    let probe = first.path[0].to_vec();
    train_on_samples(&samples, obs_dim, action_dim, arch, config, &probe)
}

/// Trains on explicit `(obs, chunk)` pairs. The observation normalizer is fitted here.
pub fn train_on_samples(
    samples: &[PolicySample],
    obs_dim: usize,
    action_dim: usize,
    arch: &PolicyArch,
    config: &PolicyTrainConfig,
    probe: &[f64],
) -> Result<(DiffusionPolicy, PolicyTrainReport)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(CoreError::Empty("no training samples"));
    }
    let chunk_dim = arch.chunk_len * action_dim;
    if let Some(s) = samples.iter().find(|s| s.chunk.len() != chunk_dim || s.obs.len() != obs_dim) {
        return Err(CoreError::Shape(format!(
            "sample with obs {} and chunk {} does not match {obs_dim}/{chunk_dim}",
            s.obs.len(),
            s.chunk.len()
        )));
    }
    let normalizer = Normalizer::fit(samples.iter().map(|s| s.obs.as_slice()), obs_dim)?;
    let spec = PolicySpec {
        obs_dim,
        action_dim,
        chunk_len: arch.chunk_len,
        hidden: arch.hidden,
        time_embed_dim: arch.time_embed_dim,
        schedule: arch.schedule,
        normalizer,
    };
    let mut policy = DiffusionPolicy::new(spec, rng::derive(config.seed, "policy-init"))?;
    let normed: Vec<Vec<f64>> = samples.iter().map(|s| policy.spec.normalizer.apply(&s.obs)).collect();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &policy.store,
    );
    let mut r = rng::rng(rng::derive(config.seed, "policy-train"));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = PolicyTrainReport::default();
    let k_max = policy.schedule.steps();
    let e = arch.time_embed_dim;
    let planned = (config.epochs * samples.len().div_ceil(config.batch_size)) as u64;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let b = batch.len();
            let mut noisy = Vec::with_capacity(b * chunk_dim);
            let mut target = Vec::with_capacity(b * chunk_dim);
            let mut obs = Vec::with_capacity(b * obs_dim);
            let mut emb = Vec::with_capacity(b * e);
            for &i in batch {
                let k = r.random_range(1..=k_max);
                let eps = normal_vec(chunk_dim, &mut r);
                noisy.extend(policy.schedule.q_sample(&samples[i].chunk, k, &eps)?);
                target.extend(eps);
                obs.extend_from_slice(&normed[i]);
                emb.extend_from_slice(policy.embedding(k));
            }
            let grads = {
                let mut g = Graph::eval(&policy.store);
                let x = g.input(Tensor::matrix(b, chunk_dim, noisy)?);
                let o = g.input(Tensor::matrix(b, obs_dim, obs)?);
                let em = g.input(Tensor::matrix(b, e, emb)?);
                let pred = policy.forward_graph(&mut g, x, o, em)?;
                let t = g.input(Tensor::matrix(b, chunk_dim, target)?);
                let loss = g.mse(pred, t)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(CoreError::NonFiniteLoss { epoch });
                }
                total += value;
                batches += 1;
                g.backward(loss)?
            };
            adam.config.lr = config.lr * config.lr_decay.factor(adam.step_count(), planned);
            adam.step(&mut policy.store, &grads)?;
        }
        report.losses.push(total / batches as f64);
        if epoch % config.monitor_every == 0 || epoch == config.epochs {
            policy.refresh()?;
            let spread = sample_spread(
                &policy,
                probe,
                config.variance_samples,
                rng::derive(config.seed, "policy-monitor"),
            )?;
            report.spread.push((epoch, spread));
            if spread < config.variance_floor {
                report.early_stopped = true;
                break;
            }
        }
    }
    report.steps = adam.step_count();
    policy.refresh()?;
    Ok((policy, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(obs_dim: usize, action_dim: usize, chunk_len: usize) -> PolicySpec {
        PolicySpec {
            obs_dim,
            action_dim,
            chunk_len,
            hidden: 16,
            time_embed_dim: 8,
            schedule: ScheduleParams {
                steps: 10,
                ..ScheduleParams::default()
            },
            normalizer: Normalizer::identity(obs_dim),
        }
    }

    #[test]
    fn normalizer_fit() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let n = Normalizer::fit(rows.iter().map(Vec::as_slice), 2).unwrap();
        assert_eq!(n.mean, vec![2.0, 5.0]);
        assert_eq!(n.std, vec![1.0, 1.0]);
        assert_eq!(n.apply(&[3.0, 6.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn fast_path_matches_graph() {
        let mut spec = small_spec(2, 2, 3);
        spec.normalizer = Normalizer {
            mean: vec![0.5, 0.2],
            std: vec![2.0, 0.5],
        };
        let p = DiffusionPolicy::new(spec, 4).unwrap();
        let obs = [0.3, -0.7];
        let noisy: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        for k in [1, 4, 10] {
            let fast = p.predict_noise(&obs, &noisy, k).unwrap();
            let mut g = Graph::eval(p.params());
            let x = g.input(Tensor::matrix(2, 6, noisy.clone()).unwrap());
            let o = p.spec().normalizer.apply(&obs);
            let o = g.input(Tensor::matrix(2, 2, [o.clone(), o].concat()).unwrap());
            let e = g.input(Tensor::matrix(2, 8, [p.embedding(k), p.embedding(k)].concat()).unwrap());
            let out = p.forward_graph(&mut g, x, o, e).unwrap();
            for (a, b) in fast.iter().zip(g.value(out).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_shape_and_determinism() {
        let p = DiffusionPolicy::new(small_spec(2, 2, 8), 1).unwrap();
        let a = sample_chunk(&p, &[0.1, 0.2], 9).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, sample_chunk(&p, &[0.1, 0.2], 9).unwrap());
        assert_ne!(a, sample_chunk(&p, &[0.1, 0.2], 10).unwrap());
    }

    #[test]
    fn single_candidate_equals_substream_chunk() {
        let p = DiffusionPolicy::new(small_spec(2, 2, 4), 1).unwrap();
        let many = sample_n_chunks(&p, &[0.0, 0.5], 1, 77).unwrap();
        assert_eq!(many[0], sample_chunk(&p, &[0.0, 0.5], rng::substream(77, 0)).unwrap());
        assert!(sample_n_chunks(&p, &[0.0, 0.5], 0, 77).is_err());
        let a = sample_n_chunks(&p, &[0.0, 0.5], 5, 3).unwrap();
        assert_eq!(a, sample_n_chunks(&p, &[0.0, 0.5], 5, 3).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = DiffusionPolicy::new(small_spec(2, 2, 4), 5).unwrap();
        let bytes = p.checkpoint().unwrap().to_bytes().unwrap();
        let q = DiffusionPolicy::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(p.digest(), q.digest());
        assert_eq!(sample_chunk(&p, &[0.1, 0.1], 2).unwrap(), sample_chunk(&q, &[0.1, 0.1], 2).unwrap());
    }

    #[test]
    fn pairwise_distance() {
        let c = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        assert_eq!(mean_pairwise_distance(&c), 5.0);
        let sd = per_dim_std(&c);
        assert!((sd[0] - 4.5f64.sqrt()).abs() < 1e-15);
        assert!((sd[1] - 8f64.sqrt()).abs() < 1e-15);
    }
}
