//! Central-difference gradient oracle.

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Compares analytic gradients of a scalar loss with central differences.
///
/// `loss` builds the scalar from the graph and the input variables. When
/// `train_seed` is set the graph runs in training mode with that dropout
/// seed, which yields the same mask on every re-evaluation.
///
/// Returns the maximum, over parameter tensors and input tensors, of
/// `||analytic - numeric|| / (||analytic|| + ||numeric|| + 1e-12)`.
pub fn check_gradients<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    h: f64,
    train_seed: Option<u64>,
    loss: F,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(NnError::FiniteDifferenceStep(h));
    }
    fn graph(s: &ParamStore, train_seed: Option<u64>) -> Graph<'_> {
        match train_seed {
            Some(seed) => Graph::train(s, seed),
            None => Graph::eval(s),
        }
    }
    let eval = |s: &ParamStore, xs: &[Tensor]| -> Result<f64> {
        let mut g = graph(s, train_seed);
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let l = loss(&mut g, &vars)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(NnError::NonFinite("loss during finite differencing".into()));
        }
        Ok(v)
    };

    let mut g = graph(store, train_seed);
    let vars: Vec<Var> = inputs.iter().map(|x| g.input_with_grad(x.clone())).collect();
    let l = loss(&mut g, &vars)?;
    if !g.value(l).is_finite() {
        return Err(NnError::NonFinite("loss".into()));
    }
    let grads = g.backward(l)?;
    if !grads.params().iter().all(Tensor::is_finite) {
        return Err(NnError::NonFinite("parameter gradient".into()));
    }

    let mut worst: f64 = 0.0;
    let mut work = store.clone();
    for id in store.ids() {
        let n = store.get(id).len();
        let mut numeric = Vec::with_capacity(n);
        for k in 0..n {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + h;
            let plus = eval(&work, inputs)?;
            work.get_mut(id).data_mut()[k] = orig - h;
            let minus = eval(&work, inputs)?;
            work.get_mut(id).data_mut()[k] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        worst = worst.max(relative_error(grads.param(id).data(), &numeric));
    }

    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .input(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = Vec::with_capacity(inputs[i].len());
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            xs[i].data_mut()[k] = orig + h;
            let plus = eval(store, &xs)?;
            xs[i].data_mut()[k] = orig - h;
            let minus = eval(store, &xs)?;
            xs[i].data_mut()[k] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let a = norm(&mut analytic.iter().copied());
    let n = norm(&mut numeric.iter().copied());
    diff / (a + n + 1e-12)
}
