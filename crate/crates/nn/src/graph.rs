//! Eager tape for reverse-mode differentiation.
//!
//! Every op evaluates immediately and appends a node recording its parents.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for all
//! parameters and for inputs created with [`Graph::input_with_grad`].
//! Parameters are borrowed from a [`ParamStore`], never copied onto the tape.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Variance floor used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    pub(crate) index: usize,
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LogSigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        floored: Vec<bool>,
    },
    Dropout(Var, Vec<f64>),
    Concat(Vec<Var>),
    SliceRows(Var, usize),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    BceWithLogits(Var, Vec<f64>),
    MarginHinge {
        a: Var,
        b: Var,
        margin: f64,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    id: u64,
    store: &'p ParamStore,
    nodes: Vec<Node>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'p> Graph<'p> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn eval(store: &'p ParamStore) -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            store,
            nodes: Vec::new(),
            dropout_rng: None,
        }
    }

    /// Training-mode graph; dropout masks are drawn from a stream seeded by `seed`.
    pub fn train(store: &'p ParamStore, seed: u64) -> Self {
        let mut g = Self::eval(store);
        g.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        g
    }

    pub fn is_train(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.index];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    /// Smallest `|x|` over every ReLU input recorded so far, or `None` without
    /// ReLUs. Finite differences with a step that can move an input across
    /// zero measure the kink, not the gradient.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => self.value(x).data().iter().map(|v| v.abs()).reduce(f64::min),
                _ => None,
            })
            .reduce(f64::min)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(NnError::ForeignVariable);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.index].needs_grad
    }

    fn push(&mut self, value: Option<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.needs(*p));
        self.push(Some(value), op, needs)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Some(value), Op::Input, false)
    }

    /// Input whose gradient is reported by [`Graph::backward`].
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.push(Some(value), Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(None, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        if ac != br {
            return Err(NnError::Shape {
                op: "matmul",
                expected: vec![ac, bc],
                got: vec![br, bc],
            });
        }
        let (c, m, n) = gemm(
            self.value(a).data(),
            (ar, ac),
            false,
            self.value(b).data(),
            (br, bc),
            false,
        );
        let out = Tensor::matrix(m, n, c)?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a bias vector `[n]` to every row of `[rows, n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (rows, cols) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.len() != cols {
            return Err(NnError::Shape {
                op: "add_bias",
                expected: vec![cols],
                got: b.shape().to_vec(),
            });
        }
        let mut out = self.value(x).clone();
        for r in 0..rows {
            for (o, bv) in out.data_mut()[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(b.data())
            {
                *o += bv;
            }
        }
        Ok(self.push_op(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x W + b` with `W` stored as `[in, out]`.
    pub fn linear(&mut self, x: Var, weight: ParamId, bias: ParamId) -> Result<Var> {
        let w = self.param(weight);
        let b = self.param(bias);
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NnError::Shape {
                op,
                expected: sa.to_vec(),
                got: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v * factor);
        Ok(self.push_op(out, Op::Scale(x, factor), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v.max(0.0));
        Ok(self.push_op(out, Op::Relu(x), &[x]))
    }

    /// Elementwise `ln σ(x)`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(log_sigmoid);
        Ok(self.push_op(out, Op::LogSigmoid(x), &[x]))
    }

    /// Row-wise layer normalization followed by the affine map `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        self.check(x)?;
        let (rows, cols) = self.value(x).dims2()?;
        if self.store.get(gamma).len() != cols || self.store.get(beta).len() != cols {
            return Err(NnError::Shape {
                op: "layer_norm",
                expected: vec![cols],
                got: self.store.get(gamma).shape().to_vec(),
            });
        }
        let norm = normalize_rows(self.value(x).data(), rows, cols);
        let g = self.store.get(gamma).data();
        let b = self.store.get(beta).data();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(norm.xhat[r * cols + c] * g[c] + b[c]);
            }
        }
        let out = Tensor::matrix(rows, cols, out)?;
        let gv = self.param(gamma);
        let bv = self.param(beta);
        Ok(self.push_op(
            out,
            Op::LayerNorm {
                x,
                gamma: gv,
                beta: bv,
                xhat: norm.xhat,
                inv_std: norm.inv_std,
                floored: norm.floored,
            },
            &[x, gv, bv],
        ))
    }

    /// Inverted dropout. Identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.check(x)?;
        if p <= 0.0 || self.dropout_rng.is_none() {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let n = self.value(x).len();
        let rng = self.dropout_rng.as_mut().expect("train mode");
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let out = self.value(x).zip_map(
            &Tensor::new(self.value(x).shape().to_vec(), mask.clone())?,
            |a, m| a * m,
        );
        Ok(self.push_op(out, Op::Dropout(x, mask), &[x]))
    }

    /// Concatenates 2-D values along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut total = 0;
        for &p in parts {
            self.check(p)?;
            let (r, c) = self.value(p).dims2()?;
            if *rows.get_or_insert(r) != r {
                return Err(NnError::Shape {
                    op: "concat",
                    expected: vec![rows.unwrap_or(0)],
                    got: vec![r],
                });
            }
            total += c;
        }
        let rows = rows.unwrap_or(0);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::matrix(rows, total, out)?;
        Ok(self.push_op(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Rows `start..end` of a 2-D value.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.check(x)?;
        let (rows, cols) = self.value(x).dims2()?;
        if start > end || end > rows {
            return Err(NnError::Shape {
                op: "slice_rows",
                expected: vec![rows, cols],
                got: vec![start, end],
            });
        }
        let data = self.value(x).data()[start * cols..end * cols].to_vec();
        let out = Tensor::matrix(end - start, cols, data)?;
        Ok(self.push_op(out, Op::SliceRows(x, start), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = Tensor::scalar(self.value(x).sum());
        Ok(self.push_op(out, Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        Ok(self.push_op(out, Op::Mean(x), &[x]))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let p = self.value(pred);
        let t = self.value(target);
        let n = p.len() as f64;
        let loss = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        Ok(self.push_op(Tensor::scalar(loss), Op::Mse(pred, target), &[pred, target]))
    }

    /// Mean binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        self.check(logits)?;
        let l = self.value(logits);
        if l.len() != labels.len() {
            return Err(NnError::Shape {
                op: "bce_with_logits",
                expected: vec![l.len()],
                got: vec![labels.len()],
            });
        }
        let loss = l
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| bce_with_logits(x, y))
            .sum::<f64>()
            / labels.len() as f64;
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::BceWithLogits(logits, labels.to_vec()),
            &[logits],
        ))
    }

    /// Mean over rows of `max(0, margin - ||a_i - b_i||)^2`.
    pub fn margin_hinge(&mut self, a: Var, b: Var, margin: f64) -> Result<Var> {
        self.same_shape("margin_hinge", a, b)?;
        let (rows, _) = self.value(a).dims2()?;
        let dists = row_distances(self.value(a), self.value(b));
        let loss = dists
            .iter()
            .map(|d| {
                let h = (margin - d).max(0.0);
                h * h
            })
            .sum::<f64>()
            / rows as f64;
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::MarginHinge { a, b, margin },
            &[a, b],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(NnError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for i in (0..=loss.index).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Input | Op::Param(_) => {
                    grads[i] = Some(dy);
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ad = av.dims2()?;
                    let bd = bv.dims2()?;
                    let dd = (ad.0, bd.1);
                    if self.needs(*a) {
                        let (g, m, n) = gemm(dy.data(), dd, false, bv.data(), bd, true);
                        accumulate(&mut grads, *a, Tensor::matrix(m, n, g)?.reshape(av.shape().to_vec())?);
                    }
                    if self.needs(*b) {
                        let (g, m, n) = gemm(av.data(), ad, true, dy.data(), dd, false);
                        accumulate(&mut grads, *b, Tensor::matrix(m, n, g)?.reshape(bv.shape().to_vec())?);
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.needs(*bias) {
                        let (rows, cols) = dy.dims2()?;
                        let mut db = vec![0.0; cols];
                        for r in 0..rows {
                            for (acc, v) in db.iter_mut().zip(dy.row_slice(r)) {
                                *acc += v;
                            }
                        }
                        let shape = self.value(*bias).shape().to_vec();
                        accumulate(&mut grads, *bias, Tensor::new(shape, db)?);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, dy);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.zip_map(self.value(*b), |g, v| g * v));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy.zip_map(self.value(*a), |g, v| g * v));
                    }
                }
                Op::Scale(x, f) => {
                    let f = *f;
                    accumulate(&mut grads, *x, dy.map(|v| v * f));
                }
                Op::Relu(x) => {
                    let out = self.nodes[i].value.as_ref().expect("relu output");
                    let dx = dy.zip_map(out, |g, o| if o > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *x, dx);
                }
                Op::LogSigmoid(x) => {
                    let dx = dy.zip_map(self.value(*x), |g, v| g * sigmoid(-v));
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    floored,
                } => {
                    let (rows, cols) = dy.dims2()?;
                    let gv = self.value(*gamma).data();
                    if self.needs(*gamma) || self.needs(*beta) {
                        let mut dg = vec![0.0; cols];
                        let mut db = vec![0.0; cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                let g = dy.data()[r * cols + c];
                                dg[c] += g * xhat[r * cols + c];
                                db[c] += g;
                            }
                        }
                        accumulate(&mut grads, *gamma, Tensor::vector(dg));
                        accumulate(&mut grads, *beta, Tensor::vector(db));
                    }
                    if self.needs(*x) {
                        let mut dx = vec![0.0; rows * cols];
                        let n = cols as f64;
                        for r in 0..rows {
                            let base = r * cols;
                            let dxhat: Vec<f64> =
                                (0..cols).map(|c| dy.data()[base + c] * gv[c]).collect();
                            let mean_d = dxhat.iter().sum::<f64>() / n;
                            let mean_dx = if floored[r] {
                                0.0
                            } else {
                                dxhat
                                    .iter()
                                    .zip(&xhat[base..base + cols])
                                    .map(|(d, h)| d * h)
                                    .sum::<f64>()
                                    / n
                            };
                            for c in 0..cols {
                                dx[base + c] = inv_std[r]
                                    * (dxhat[c] - mean_d - xhat[base + c] * mean_dx);
                            }
                        }
                        let shape = self.value(*x).shape().to_vec();
                        accumulate(&mut grads, *x, Tensor::new(shape, dx)?);
                    }
                }
                Op::Dropout(x, mask) => {
                    let dx = Tensor::new(
                        dy.shape().to_vec(),
                        dy.data().iter().zip(mask).map(|(g, m)| g * m).collect(),
                    )?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let (rows, total) = dy.dims2()?;
                    let mut offset = 0;
                    for p in parts {
                        let (_, c) = self.value(*p).dims2()?;
                        if self.needs(*p) {
                            let mut part = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                part.extend_from_slice(
                                    &dy.data()[r * total + offset..r * total + offset + c],
                                );
                            }
                            let shape = self.value(*p).shape().to_vec();
                            accumulate(&mut grads, *p, Tensor::new(shape, part)?);
                        }
                        offset += c;
                    }
                }
                Op::SliceRows(x, start) => {
                    let src = self.value(*x);
                    let (_, cols) = src.dims2()?;
                    let mut dx = Tensor::zeros(src.shape());
                    let off = start * cols;
                    dx.data_mut()[off..off + dy.len()].copy_from_slice(dy.data());
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let g = dy.item();
                    accumulate(&mut grads, *x, Tensor::filled(self.value(*x).shape(), g));
                }
                Op::Mean(x) => {
                    let t = self.value(*x);
                    let g = dy.item() / t.len() as f64;
                    accumulate(&mut grads, *x, Tensor::filled(t.shape(), g));
                }
                Op::Mse(p, t) => {
                    let pv = self.value(*p);
                    let scale = 2.0 * dy.item() / pv.len() as f64;
                    let dp = pv.zip_map(self.value(*t), |a, b| scale * (a - b));
                    if self.needs(*t) {
                        accumulate(&mut grads, *t, dp.map(|v| -v));
                    }
                    if self.needs(*p) {
                        accumulate(&mut grads, *p, dp);
                    }
                }
                Op::BceWithLogits(logits, labels) => {
                    let lv = self.value(*logits);
                    let scale = dy.item() / labels.len() as f64;
                    let dx = Tensor::new(
                        lv.shape().to_vec(),
                        lv.data()
                            .iter()
                            .zip(labels)
                            .map(|(&x, &y)| scale * (sigmoid(x) - y))
                            .collect(),
                    )?;
                    accumulate(&mut grads, *logits, dx);
                }
                Op::MarginHinge { a, b, margin } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (rows, cols) = av.dims2()?;
                    let dists = row_distances(av, bv);
                    let mut da = vec![0.0; rows * cols];
                    for (r, &d) in dists.iter().enumerate() {
                        let h = margin - d;
                        // Subgradient zero at coincident embeddings.
                        if h <= 0.0 || d == 0.0 {
                            continue;
                        }
                        let coef = -2.0 * h / d * dy.item() / rows as f64;
                        for c in 0..cols {
                            let k = r * cols + c;
                            da[k] = coef * (av.data()[k] - bv.data()[k]);
                        }
                    }
                    let da = Tensor::new(av.shape().to_vec(), da)?;
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, da.map(|v| -v));
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, da);
                    }
                }
            }
        }

        let mut params: Vec<Tensor> = self
            .store
            .ids()
            .map(|id| Tensor::zeros(self.store.get(id).shape()))
            .collect();
        let mut inputs = Vec::new();
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match self.nodes[i].op {
                Op::Param(id) => params[id.index()].add_assign(&g),
                Op::Input => inputs.push((i, g)),
                _ => {}
            }
        }
        Ok(Gradients { params, inputs })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.index] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn row_distances(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let rows = a.rows();
    (0..rows)
        .map(|r| {
            a.row_slice(r)
                .iter()
                .zip(b.row_slice(r))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of one logit in log-sum-exp form.
pub fn bce_with_logits(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

pub(crate) struct RowNorm {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub floored: Vec<bool>,
}

/// Pre-affine layer normalization. The per-row variance is floored at
/// [`LAYER_NORM_EPS`], so constant rows map to zeros and rows with larger
/// variance are normalized exactly.
pub(crate) fn normalize_rows(x: &[f64], rows: usize, cols: usize) -> RowNorm {
    let mut xhat = Vec::with_capacity(rows * cols);
    let mut inv_std = Vec::with_capacity(rows);
    let mut floored = Vec::with_capacity(rows);
    let n = cols as f64;
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is_floored = var < LAYER_NORM_EPS;
        let inv = 1.0 / var.max(LAYER_NORM_EPS).sqrt();
        xhat.extend(row.iter().map(|v| (v - mean) * inv));
        inv_std.push(inv);
        floored.push(is_floored);
    }
    RowNorm {
        xhat,
        inv_std,
        floored,
    }
}

/// Pre-affine layer normalization of each row of a 2-D tensor.
pub fn layer_norm_rows(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    Tensor::new(x.shape().to_vec(), normalize_rows(x.data(), rows, cols).xhat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward() {
        let store = ParamStore::new();
        let mut g = Graph::eval(&store);
        let x = g.input(Tensor::row(vec![-1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn identity_linear_passes_input_and_sum_grad_is_ones() {
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let b = store.add("b", Tensor::zeros(&[3]));
        let mut g = Graph::eval(&store);
        let x = g.input_with_grad(Tensor::row(vec![0.5, -2.0, 3.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -2.0, 3.0]);
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.input(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_of_equal_tensors_has_zero_gradient() {
        let store = ParamStore::new();
        let mut g = Graph::eval(&store);
        let x = g.input_with_grad(Tensor::row(vec![1.0, -3.0, 0.25]));
        let y = g.input(Tensor::row(vec![1.0, -3.0, 0.25]));
        let loss = g.mse(x, y).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.input(x).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_constant_row_is_zero_before_affine() {
        let x = Tensor::matrix(1, 4, vec![3.0; 4]).unwrap();
        let n = layer_norm_rows(&x).unwrap();
        assert!(n.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_on_foreign_var_is_error() {
        let store = ParamStore::new();
        let mut g1 = Graph::eval(&store);
        let g2 = Graph::eval(&store);
        let x = g1.input(Tensor::scalar(1.0));
        assert!(matches!(g2.backward(x), Err(NnError::ForeignVariable)));
    }

    #[test]
    fn backward_requires_scalar() {
        let store = ParamStore::new();
        let mut g = Graph::eval(&store);
        let x = g.input(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(NnError::NonScalarLoss(_))));
    }

    #[test]
    fn stable_logistic_helpers() {
        assert!((bce_with_logits(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_with_logits(800.0, 1.0).abs() < 1e-12);
        assert!((bce_with_logits(-800.0, 1.0) - 800.0).abs() < 1e-9);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn margin_hinge_values() {
        let store = ParamStore::new();
        let mut g = Graph::eval(&store);
        let a = g.input(Tensor::matrix(2, 2, vec![0., 0., 0., 0.]).unwrap());
        let b = g.input(Tensor::matrix(2, 2, vec![0., 0., 0.3, 0.4]).unwrap());
        let l = g.margin_hinge(a, b, 1.0).unwrap();
        // rows: distance 0 -> 1.0, distance 0.5 -> 0.25
        assert!((g.value(l).item() - 0.625).abs() < 1e-15);
    }

    #[test]
    fn dropout_eval_is_identity_train_scales() {
        let store = ParamStore::new();
        let mut g = Graph::eval(&store);
        let x = g.input(Tensor::row(vec![1.0; 100]));
        let y = g.dropout(x, 0.5).unwrap();
        assert_eq!(x, y);

        let mut g = Graph::train(&store, 7);
        let x = g.input(Tensor::row(vec![1.0; 1000]));
        let y = g.dropout(x, 0.5).unwrap();
        let vals = g.value(y).data();
        assert!(vals.iter().all(|v| *v == 0.0 || *v == 2.0));
        let kept = vals.iter().filter(|v| **v > 0.0).count();
        assert!((400..600).contains(&kept));
    }
}
