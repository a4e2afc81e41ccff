//! Verifiers scoring `(state, action chunk, chunk index)` transitions.
//!
//! Two kinds share one network: a success classifier trained with binary
//! cross-entropy plus a contrastive margin term on its penultimate
//! embedding, and a regressor of the discounted time to success.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;
use veristeer_nn::{
    bce_with_logits, sigmoid, sinusoidal_embedding, AdamConfig, AdamState, Checkpoint, Graph, LayerSpec, Mlp,
    MlpSpec, ParamStore, Tensor, Var,
};

use crate::error::{CoreError, Result};
use crate::policy::Normalizer;
use crate::rng;
use crate::rollout::{ContrastiveSampler, RolloutDataset, Split, Trajectory, TransitionRef};

pub const CHECKPOINT_KIND: &str = "verifier";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    Classifier,
    TimeToSuccess,
}

impl VerifierKind {
    pub fn name(self) -> &'static str {
        match self {
            VerifierKind::Classifier => "classifier",
            VerifierKind::TimeToSuccess => "time_to_success",
        }
    }
}

impl std::str::FromStr for VerifierKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classifier" | "c" => Ok(Self::Classifier),
            "time_to_success" | "q" => Ok(Self::TimeToSuccess),
            other => Err(CoreError::Config(format!("unknown verifier kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierLossConfig {
    pub lambda_aux: f64,
    pub margin: f64,
}

impl Default for ClassifierLossConfig {
    fn default() -> Self {
        Self {
            lambda_aux: 0.1,
            margin: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QTargetConfig {
    pub gamma: f64,
}

impl Default for QTargetConfig {
    fn default() -> Self {
        Self { gamma: 0.99 }
    }
}

/// Network shape; stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierSpec {
    pub kind: VerifierKind,
    pub obs_dim: usize,
    pub chunk_dim: usize,
    pub encoder_width: usize,
    pub step_embed_dim: usize,
    pub trunk: Vec<usize>,
    pub dropout: f64,
    pub normalizer: Normalizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub split_fraction: f64,
    pub encoder_width: usize,
    pub step_embed_dim: usize,
    pub trunk: Vec<usize>,
    /// Dropout before the final linear layer, for both kinds.
    pub dropout: f64,
    pub classifier: ClassifierLossConfig,
    pub q_target: QTargetConfig,
    /// Draw fresh contrastive partners every epoch instead of once.
    pub resample_pairs: bool,
    /// Weight BCE terms so both classes contribute equally.
    pub balance_classes: bool,
}

impl Default for VerifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
            split_fraction: 0.8,
            encoder_width: 64,
            step_embed_dim: 64,
            trunk: vec![128, 64],
            dropout: 0.5,
            classifier: ClassifierLossConfig::default(),
            q_target: QTargetConfig::default(),
            resample_pairs: true,
            balance_classes: false,
        }
    }
}

impl VerifierTrainConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("verifier epochs and batch size must be positive");
        }
        if self.trunk.is_empty() || self.trunk.iter().any(|&w| w < 2) {
            return bad("verifier trunk needs layers of width at least 2");
        }
        if !(self.classifier.lambda_aux >= 0.0) || !(self.classifier.margin > 0.0) {
            return bad("classifier loss needs lambda_aux >= 0 and margin > 0");
        }
        if !(self.q_target.gamma > 0.0 && self.q_target.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        Ok(())
    }
}

/// `γ^(T−t)` on a successful trajectory, `0` on a failed one.
pub fn compute_q_target(trajectory: &Trajectory, t: usize, gamma: f64) -> Result<f64> {
    if t >= trajectory.len() {
        return Err(CoreError::TransitionIndex {
            index: t,
            len: trajectory.len(),
        });
    }
    match (trajectory.success, trajectory.success_step) {
        (true, Some(big_t)) if t <= big_t => Ok(gamma.powi((big_t - t) as i32)),
        (true, _) => Err(CoreError::Record {
            line: 0,
            reason: "successful trajectory without a valid success step".into(),
        }),
        (false, _) => Ok(0.0),
    }
}

/// Mean over pairs of `max(0, m − ‖z⁺ − z⁻‖)²`; rows are `dim` wide.
pub fn contrastive_aux_loss(z_pos: &[f64], z_neg: &[f64], dim: usize, margin: f64) -> Result<f64> {
    if z_pos.len() != z_neg.len() || dim == 0 || !z_pos.len().is_multiple_of(dim) || z_pos.is_empty() {
        return Err(CoreError::Shape(format!(
            "embedding batches of {} and {} values with width {dim}",
            z_pos.len(),
            z_neg.len()
        )));
    }
    let rows = z_pos.len() / dim;
    let total: f64 = z_pos
        .chunks(dim)
        .zip(z_neg.chunks(dim))
        .map(|(a, b)| {
            let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            (margin - d).max(0.0).powi(2)
        })
        .sum();
    Ok(total / rows as f64)
}

/// Mean BCE on logits plus `λ_aux` times the contrastive term.
pub fn classifier_loss(
    logits: &[f64],
    labels: &[f64],
    z_pos: &[f64],
    z_neg: &[f64],
    dim: usize,
    config: &ClassifierLossConfig,
) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(CoreError::Shape("logits and labels differ in length".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(CoreError::NonBinaryLabel(y));
    }
    let bce = logits.iter().zip(labels).map(|(&x, &y)| bce_with_logits(x, y)).sum::<f64>() / logits.len() as f64;
    if config.lambda_aux == 0.0 {
        return Ok(bce);
    }
    Ok(bce + config.lambda_aux * contrastive_aux_loss(z_pos, z_neg, dim, config.margin)?)
}

/// Scores transitions; implemented by trained networks and by test doubles.
pub trait Verifier: Sync {
    /// Scores for several chunks taken from the same state and chunk index.
    /// Classifiers return probabilities, time-to-success verifiers raw values.
    fn score(&self, state: &[f64], t: usize, chunks: &[Vec<f64>]) -> Result<Vec<f64>>;
    /// Gradient with respect to the chunk of `ln σ(logit)` for classifiers
    /// and of the raw value otherwise.
    fn score_gradient(&self, state: &[f64], t: usize, chunk: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone)]
pub struct VerifierNet {
    spec: VerifierSpec,
    store: ParamStore,
    state_encoder: Mlp,
    action_encoder: Mlp,
    trunk: Mlp,
    /// Digest of the policy whose rollouts trained this verifier.
    source_policy: String,
}

/// Outputs of one forward pass.
pub struct VerifierOutput {
    pub output: Var,
    pub embedding: Var,
}

impl VerifierNet {
    pub fn new(spec: VerifierSpec, seed: u64) -> Result<Self> {
        if spec.obs_dim == 0 || spec.chunk_dim == 0 || spec.normalizer.dim() != spec.obs_dim {
            return Err(CoreError::Config("verifier dimensions are inconsistent".into()));
        }
        let mut r = rng::rng(seed);
        let mut store = ParamStore::new();
        let w = spec.encoder_width;
        let state_encoder = Mlp::new(
            MlpSpec {
                input_dim: spec.obs_dim,
                layers: vec![LayerSpec::relu(w), LayerSpec::relu(w)],
                dropout: 0.0,
            },
            "state_encoder",
            &mut store,
            &mut r,
        )?;
        let action_encoder = Mlp::new(
            MlpSpec {
                input_dim: spec.chunk_dim,
                layers: vec![LayerSpec::relu(w), LayerSpec::relu(w)],
                dropout: 0.0,
            },
            "action_encoder",
            &mut store,
            &mut r,
        )?;
        let mut layers: Vec<LayerSpec> = spec.trunk.iter().map(|&w| LayerSpec::norm_relu(w)).collect();
        layers.push(LayerSpec::linear(1));
        let trunk = Mlp::new(
            MlpSpec {
                input_dim: 2 * w + spec.step_embed_dim,
                layers,
                dropout: spec.dropout,
            },
            "trunk",
            &mut store,
            &mut r,
        )?;
        Ok(Self {
            spec,
            store,
            state_encoder,
            action_encoder,
            trunk,
            source_policy: String::new(),
        })
    }

    pub fn spec(&self) -> &VerifierSpec {
        &self.spec
    }

    pub fn kind(&self) -> VerifierKind {
        self.spec.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn source_policy(&self) -> &str {
        &self.source_policy
    }

    pub fn set_source_policy(&mut self, digest: impl Into<String>) {
        self.source_policy = digest.into();
    }

    pub fn embedding_dim(&self) -> usize {
        *self.spec.trunk.last().expect("validated trunk")
    }

    /// Row-stacked normalized states, chunks and step embeddings for a batch.
    pub fn batch_inputs<'a>(
        &self,
        rows: impl IntoIterator<Item = (&'a [f64], &'a [f64], usize)>,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let (mut s, mut a, mut e, mut n) = (Vec::new(), Vec::new(), Vec::new(), 0usize);
        for (state, chunk, t) in rows {
            if state.len() != self.spec.obs_dim || chunk.len() != self.spec.chunk_dim {
                return Err(CoreError::Shape(format!(
                    "verifier expects state {} and chunk {}, got {} and {}",
                    self.spec.obs_dim,
                    self.spec.chunk_dim,
                    state.len(),
                    chunk.len()
                )));
            }
            s.extend(self.spec.normalizer.apply(state));
            a.extend_from_slice(chunk);
            e.extend(sinusoidal_embedding(t as f64, self.spec.step_embed_dim)?);
            n += 1;
        }
        Ok((
            Tensor::matrix(n, self.spec.obs_dim, s)?,
            Tensor::matrix(n, self.spec.chunk_dim, a)?,
            Tensor::matrix(n, self.spec.step_embed_dim, e)?,
        ))
    }

    /// Builds the network on `g` from prepared input nodes.
    pub fn forward(&self, g: &mut Graph, state: Var, chunk: Var, step: Var) -> Result<VerifierOutput> {
        let hs = self.state_encoder.forward(g, state)?.output;
        let ha = self.action_encoder.forward(g, chunk)?.output;
        let x = g.concat(&[hs, ha, step])?;
        let out = self.trunk.forward(g, x)?;
        Ok(VerifierOutput {
            output: out.output,
            embedding: out.features,
        })
    }

    /// Raw network outputs (logits or values) in evaluation mode.
    pub fn raw_outputs(&self, state: &[f64], t: usize, chunks: &[Vec<f64>]) -> Result<Vec<f64>> {
        if chunks.is_empty() {
            return Ok(Vec::new());
        }
        let (s, a, e) = self.batch_inputs(chunks.iter().map(|c| (state, c.as_slice(), t)))?;
        let mut g = Graph::eval(&self.store);
        let (s, a, e) = (g.input(s), g.input(a), g.input(e));
        let out = self.forward(&mut g, s, a, e)?.output;
        Ok(g.value(out).data().to_vec())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(
            CHECKPOINT_KIND,
            &self.spec,
            json!({ "source_policy": self.source_policy }),
            self.store.clone(),
        )?)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(CoreError::Config(format!("checkpoint kind `{}` is not a verifier", ckpt.kind)));
        }
        let spec: VerifierSpec = serde_json::from_value(ckpt.spec.clone())?;
        let mut net = Self::new(spec, 0)?;
        ckpt.load_params_into(&mut net.store)?;
        net.source_policy = ckpt.meta["source_policy"].as_str().unwrap_or_default().to_string();
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(self.checkpoint()?.save(path)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Verifier for VerifierNet {
    fn score(&self, state: &[f64], t: usize, chunks: &[Vec<f64>]) -> Result<Vec<f64>> {
        let raw = self.raw_outputs(state, t, chunks)?;
        Ok(match self.spec.kind {
            VerifierKind::Classifier => raw.into_iter().map(sigmoid).collect(),
            VerifierKind::TimeToSuccess => raw,
        })
    }

    fn score_gradient(&self, state: &[f64], t: usize, chunk: &[f64]) -> Result<Vec<f64>> {
        let (s, a, e) = self.batch_inputs([(state, chunk, t)])?;
        let mut g = Graph::eval(&self.store);
        let s = g.input(s);
        let a = g.input_with_grad(a);
        let e = g.input(e);
        let mut out = self.forward(&mut g, s, a, e)?.output;
        if self.spec.kind == VerifierKind::Classifier {
            out = g.log_sigmoid(out)?;
        }
        let total = g.sum(out)?;
        let grads = g.backward(total)?;
        let grad = grads.input(a).ok_or(CoreError::NonFiniteGradient)?.data().to_vec();
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFiniteGradient);
        }
        Ok(grad)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerifierTrainReport {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Fraction of validation transitions classified correctly (classifier kind).
    pub val_accuracy: Option<f64>,
}

/// 1-based index of the first minimum.
pub fn best_epoch(val_losses: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in val_losses.iter().enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i + 1)
}

fn refs(dataset: &RolloutDataset, ids: &[usize]) -> Vec<TransitionRef> {
    ids.iter()
        .flat_map(|&trajectory| {
            (0..dataset.trajectories[trajectory].len()).map(move |step| TransitionRef { trajectory, step })
        })
        .collect()
}

struct Trainer<'a> {
    dataset: &'a RolloutDataset,
    config: &'a VerifierTrainConfig,
    kind: VerifierKind,
    /// Per-class BCE weights `(failure, success)`.
    class_weights: (f64, f64),
}

impl Trainer<'_> {
    fn transition(&self, r: TransitionRef) -> (&[f64], &[f64], usize) {
        let tr = &self.dataset.trajectories[r.trajectory].transitions[r.step];
        (tr.state.as_slice(), tr.action.as_slice(), tr.t)
    }

    fn label(&self, r: TransitionRef) -> f64 {
        self.dataset.trajectories[r.trajectory].label()
    }

    /// Loss over `anchors` with optional partners; returns the graph output and value.
    fn loss<'g>(
        &self,
        net: &VerifierNet,
        g: &mut Graph<'g>,
        anchors: &[TransitionRef],
        partners: &[TransitionRef],
    ) -> Result<Var> {
        let rows = anchors.iter().chain(partners).map(|&r| self.transition(r));
        let (s, a, e) = net.batch_inputs(rows)?;
        let (s, a, e) = (g.input(s), g.input(a), g.input(e));
        let out = net.forward(g, s, a, e)?;
        let b = anchors.len();
        let pred = g.slice_rows(out.output, 0, b)?;
        match self.kind {
            VerifierKind::TimeToSuccess => {
                let targets = anchors
                    .iter()
                    .map(|&r| {
                        compute_q_target(&self.dataset.trajectories[r.trajectory], r.step, self.config.q_target.gamma)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let target = g.input(Tensor::matrix(b, 1, targets)?);
                Ok(g.mse(pred, target)?)
            }
            VerifierKind::Classifier => {
                let labels: Vec<f64> = anchors.iter().map(|&r| self.label(r)).collect();
                let bce = if self.class_weights == (1.0, 1.0) {
                    g.bce_with_logits(pred, &labels)?
                } else {
                    // −mean(w₁ y ln σ(x) + w₀ (1−y) ln σ(−x))
                    let (w0, w1) = self.class_weights;
                    let pos_w: Vec<f64> = labels.iter().map(|&y| w1 * y).collect();
                    let neg_w: Vec<f64> = labels.iter().map(|&y| w0 * (1.0 - y)).collect();
                    let pos_w = g.input(Tensor::matrix(b, 1, pos_w)?);
                    let neg_w = g.input(Tensor::matrix(b, 1, neg_w)?);
                    let lp = g.log_sigmoid(pred)?;
                    let flipped = g.scale(pred, -1.0)?;
                    let ln = g.log_sigmoid(flipped)?;
                    let a = g.mul(lp, pos_w)?;
                    let c = g.mul(ln, neg_w)?;
                    let total = g.add(a, c)?;
                    let total = g.sum(total)?;
                    g.scale(total, -1.0 / b as f64)?
                };
                let cfg = self.config.classifier;
                if cfg.lambda_aux == 0.0 || partners.is_empty() {
                    return Ok(bce);
                }
                let za = g.slice_rows(out.embedding, 0, b)?;
                let zp = g.slice_rows(out.embedding, b, 2 * b)?;
                let aux = g.margin_hinge(za, zp, cfg.margin)?;
                let aux = g.scale(aux, cfg.lambda_aux)?;
                Ok(g.add(bce, aux)?)
            }
        }
    }

    fn partners(
        &self,
        sampler: Option<&ContrastiveSampler>,
        anchors: &[TransitionRef],
        seed: u64,
    ) -> Vec<TransitionRef> {
        let Some(sampler) = sampler else {
            return Vec::new();
        };
        let mut r = rng::rng(seed);
        anchors
            .iter()
            .map(|&a| sampler.partner(self.label(a) == 1.0, &mut r))
            .collect()
    }
}

/// Trains on an automatic stratified split of `dataset`.
pub fn train_verifier(
    dataset: &RolloutDataset,
    kind: VerifierKind,
    config: &VerifierTrainConfig,
) -> Result<(VerifierNet, VerifierTrainReport)> {
    let split = dataset.split_by_trajectory(config.split_fraction, rng::derive(config.seed, "verifier-split"))?;
    train_verifier_on_split(dataset, &split, kind, config)
}

/// Trains on the given split and returns the snapshot with the lowest
/// validation loss (earliest on ties).
pub fn train_verifier_on_split(
    dataset: &RolloutDataset,
    split: &Split,
    kind: VerifierKind,
    config: &VerifierTrainConfig,
) -> Result<(VerifierNet, VerifierTrainReport)> {
    config.validate()?;
    let first = dataset
        .trajectories
        .iter()
        .find_map(|t| t.transitions.first())
        .ok_or(CoreError::Empty("no transitions to train a verifier on"))?;
    let train = refs(dataset, &split.train);
    let val = refs(dataset, &split.val);
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::Empty("verifier split has an empty side"));
    }
    let trainer_sampler = match kind {
        VerifierKind::Classifier => Some(ContrastiveSampler::new(dataset, &split.train)?),
        VerifierKind::TimeToSuccess => None,
    };
    // Validation partners come from the validation side when it has both classes.
    let val_sampler = match kind {
        VerifierKind::Classifier => ContrastiveSampler::new(dataset, &split.val)
            .ok()
            .or_else(|| trainer_sampler.clone()),
        VerifierKind::TimeToSuccess => None,
    };

    let states: Vec<&[f64]> = split
        .train
        .iter()
        .flat_map(|&i| dataset.trajectories[i].transitions.iter().map(|t| t.state.as_slice()))
        .collect();
    let spec = VerifierSpec {
        kind,
        obs_dim: first.state.len(),
        chunk_dim: first.action.len(),
        encoder_width: config.encoder_width,
        step_embed_dim: config.step_embed_dim,
        trunk: config.trunk.clone(),
        dropout: config.dropout,
        normalizer: Normalizer::fit(states, first.state.len())?,
    };
    let mut net = VerifierNet::new(spec, rng::derive(config.seed, "verifier-init"))?;
    if let Some(p) = dataset.trajectories.first().map(|t| t.meta.policy.clone()) {
        net.set_source_policy(p);
    }

    let class_weights = if config.balance_classes && kind == VerifierKind::Classifier {
        let pos = train.iter().filter(|r| dataset.trajectories[r.trajectory].success).count() as f64;
        let n = train.len() as f64;
        (n / (2.0 * (n - pos)), n / (2.0 * pos))
    } else {
        (1.0, 1.0)
    };
    let trainer = Trainer {
        dataset,
        config,
        kind,
        class_weights,
    };

    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        net.params(),
    );
    let mut r = rng::rng(rng::derive(config.seed, "verifier-train"));
    let mut order = train.clone();
    let fixed_partners = trainer.partners(trainer_sampler.as_ref(), &train, rng::derive(config.seed, "pairs"));
    let mut partner_of: std::collections::HashMap<TransitionRef, TransitionRef> =
        train.iter().copied().zip(fixed_partners).collect();
    let val_partners = trainer.partners(val_sampler.as_ref(), &val, rng::derive(config.seed, "val-pairs"));

    let mut report = VerifierTrainReport::default();
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 1..=config.epochs {
        if config.resample_pairs && epoch > 1 {
            let fresh = trainer.partners(
                trainer_sampler.as_ref(),
                &train,
                rng::substream(rng::derive(config.seed, "pairs"), epoch as u64),
            );
            partner_of = train.iter().copied().zip(fresh).collect();
        }
        order.shuffle(&mut r);
        let (mut total, mut batches) = (0.0, 0usize);
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let partners: Vec<TransitionRef> = if trainer_sampler.is_some() {
                batch.iter().map(|a| partner_of[a]).collect()
            } else {
                Vec::new()
            };
            let grads = {
                let mut g = Graph::train(
                    net.params(),
                    rng::substream(rng::derive(config.seed, "dropout"), (epoch * 100_000 + bi) as u64),
                );
                let loss = trainer.loss(&net, &mut g, batch, &partners)?;
                let v = g.value(loss).item();
                if !v.is_finite() {
                    return Err(CoreError::NonFiniteLoss { epoch });
                }
                total += v;
                batches += 1;
                g.backward(loss)?
            };
            adam.step(net.params_mut(), &grads)?;
        }
        report.train_losses.push(total / batches as f64);

        let mut vt = 0.0;
        for (chunk, pchunk) in val
            .chunks(config.batch_size)
            .zip(chunks_or_empty(&val_partners, config.batch_size, val.len()))
        {
            let mut g = Graph::eval(net.params());
            let loss = trainer.loss(&net, &mut g, chunk, pchunk)?;
            vt += g.value(loss).item() * chunk.len() as f64;
        }
        let v = vt / val.len() as f64;
        if !v.is_finite() {
            return Err(CoreError::NonFiniteLoss { epoch });
        }
        report.val_losses.push(v);
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, net.params().clone()));
        }
    }
    report.best_epoch = best_epoch(&report.val_losses).expect("at least one epoch");
    *net.params_mut() = best.expect("at least one epoch").1;

    if kind == VerifierKind::Classifier {
        let mut correct = 0usize;
        for &r in &val {
            let (s, a, t) = trainer.transition(r);
            let logit = net.raw_outputs(s, t, &[a.to_vec()])?[0];
            if (logit > 0.0) == (trainer.label(r) == 1.0) {
                correct += 1;
            }
        }
        report.val_accuracy = Some(correct as f64 / val.len() as f64);
    }
    Ok((net, report))
}

fn chunks_or_empty(
    partners: &[TransitionRef],
    size: usize,
    anchors: usize,
) -> Box<dyn Iterator<Item = &[TransitionRef]> + '_> {
    if partners.is_empty() {
        Box::new(std::iter::repeat_n(&[][..], anchors.div_ceil(size)))
    } else {
        Box::new(partners.chunks(size))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::tests::toy_trajectory;

    #[test]
    fn q_targets() {
        let mut t = toy_trajectory(51, true, 0);
        assert_eq!(compute_q_target(&t, 50, 0.99).unwrap(), 1.0);
        assert!((compute_q_target(&t, 40, 0.99).unwrap() - 0.904_382_075_008_804_5).abs() < 1e-15);
        assert!(compute_q_target(&t, 51, 0.99).is_err());
        t.success = false;
        t.success_step = None;
        assert_eq!(compute_q_target(&t, 7, 0.99).unwrap(), 0.0);
    }

    #[test]
    fn aux_loss_closed_forms() {
        assert!((contrastive_aux_loss(&[0.3, 0.4], &[0.3, 0.4], 2, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((contrastive_aux_loss(&[0.0, 0.0], &[0.3, 0.4], 2, 1.0).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(contrastive_aux_loss(&[0.0, 0.0], &[0.6, 0.8], 2, 1.0).unwrap(), 0.0);
        assert_eq!(contrastive_aux_loss(&[0.0, 0.0], &[3.0, 0.8], 2, 1.0).unwrap(), 0.0);
        assert!(contrastive_aux_loss(&[0.0], &[0.0, 1.0], 1, 1.0).is_err());
    }

    #[test]
    fn classifier_loss_closed_forms() {
        let cfg = ClassifierLossConfig::default();
        let z = [0.0, 0.0];
        let same = classifier_loss(&[0.0], &[1.0], &z, &z, 2, &cfg).unwrap();
        assert!((same - (std::f64::consts::LN_2 + 0.1)).abs() < 1e-12);
        let off = ClassifierLossConfig {
            lambda_aux: 0.0,
            ..cfg
        };
        assert_eq!(
            classifier_loss(&[0.3], &[0.0], &z, &z, 2, &off).unwrap(),
            bce_with_logits(0.3, 0.0)
        );
        let perfect = classifier_loss(&[40.0, -40.0], &[1.0, 0.0], &[2.0, 5.0], &[0.0, 0.0], 1, &cfg).unwrap();
        assert!(perfect < 1e-15);
        assert!(matches!(
            classifier_loss(&[0.0], &[0.5], &z, &z, 2, &cfg),
            Err(CoreError::NonBinaryLabel(_))
        ));
    }

    #[test]
    fn argmin_rule() {
        assert_eq!(best_epoch(&[0.5, 0.3, 0.4]), Some(2));
        assert_eq!(best_epoch(&[0.5, 0.3, 0.3]), Some(2));
        assert_eq!(best_epoch(&[]), None);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("classifier".parse::<VerifierKind>().unwrap(), VerifierKind::Classifier);
        assert_eq!("q".parse::<VerifierKind>().unwrap(), VerifierKind::TimeToSuccess);
        assert!("x".parse::<VerifierKind>().is_err());
    }
}
