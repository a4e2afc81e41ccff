use proptest::prelude::*;
use rand::Rng;
use veristeer_core::policy::{Normalizer, PolicySpec};
use veristeer_core::steering::argmax_first;
use veristeer_core::verifier::VerifierSpec;
use veristeer_core::*;

fn policy(seed: u64, steps: usize) -> DiffusionPolicy {
    DiffusionPolicy::new(
        PolicySpec {
            obs_dim: 2,
            action_dim: 2,
            chunk_len: 8,
            hidden: 32,
            time_embed_dim: 16,
            schedule: ScheduleParams {
                steps,
                ..ScheduleParams::default()
            },
            normalizer: Normalizer {
                mean: vec![0.5, 0.5],
                std: vec![0.3, 0.3],
            },
        },
        seed,
    )
    .unwrap()
}

fn verifier(kind: VerifierKind, seed: u64) -> VerifierNet {
    VerifierNet::new(
        VerifierSpec {
            kind,
            obs_dim: 2,
            chunk_dim: 16,
            encoder_width: 16,
            step_embed_dim: 8,
            trunk: vec![16, 8],
            dropout: 0.5,
            normalizer: Normalizer::identity(2),
        },
        seed,
    )
    .unwrap()
}

/// Scores a chunk by a fixed linear functional, so the gradient is constant.
struct Linear(Vec<f64>);

impl Verifier for Linear {
    fn score(&self, _s: &[f64], _t: usize, chunks: &[Vec<f64>]) -> veristeer_core::Result<Vec<f64>> {
        Ok(chunks
            .iter()
            .map(|c| c.iter().zip(&self.0).map(|(a, b)| a * b).sum())
            .collect())
    }
    fn score_gradient(&self, _s: &[f64], _t: usize, _c: &[f64]) -> veristeer_core::Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

struct Constant;

impl Verifier for Constant {
    fn score(&self, _s: &[f64], _t: usize, chunks: &[Vec<f64>]) -> veristeer_core::Result<Vec<f64>> {
        Ok(vec![0.5; chunks.len()])
    }
    fn score_gradient(&self, _s: &[f64], _t: usize, c: &[f64]) -> veristeer_core::Result<Vec<f64>> {
        Ok(vec![0.0; c.len()])
    }
}

/// Applies a strictly increasing map to another verifier's scores.
struct Monotone<'a, F: Fn(f64) -> f64 + Sync>(&'a dyn Verifier, F);

impl<F: Fn(f64) -> f64 + Sync> Verifier for Monotone<'_, F> {
    fn score(&self, s: &[f64], t: usize, chunks: &[Vec<f64>]) -> veristeer_core::Result<Vec<f64>> {
        Ok(self.0.score(s, t, chunks)?.into_iter().map(&self.1).collect())
    }
    fn score_gradient(&self, s: &[f64], t: usize, c: &[f64]) -> veristeer_core::Result<Vec<f64>> {
        self.0.score_gradient(s, t, c)
    }
}

struct ZeroNoise(NoiseSchedule);

impl NoiseModel for ZeroNoise {
    fn chunk_dim(&self) -> usize {
        4
    }
    fn schedule(&self) -> &NoiseSchedule {
        &self.0
    }
    fn predict_noise(&self, _obs: &[f64], noisy: &[f64], _k: usize) -> veristeer_core::Result<Vec<f64>> {
        Ok(vec![0.0; noisy.len()])
    }
}

#[test]
fn zero_lambda_is_bit_identical_to_unguided() {
    let p = policy(1, 20);
    for kind in [VerifierKind::Classifier, VerifierKind::TimeToSuccess] {
        let v = verifier(kind, 2);
        for seed in 0..20 {
            let state = [0.1 + 0.03 * seed as f64, 0.5];
            let (guided, trace) = cg_sample(&p, &v, &state, 0, 0.0, None, seed).unwrap();
            assert_eq!(guided, sample_chunk(&p, &state, seed).unwrap());
            assert!(trace.perturbation_norms.iter().all(|&n| n == 0.0));
        }
    }
}

#[test]
fn constant_verifier_guidance_equals_unguided() {
    let p = policy(3, 20);
    for seed in 0..10 {
        let (guided, _) = cg_sample(&p, &Constant, &[0.2, 0.4], 1, 0.7, None, seed).unwrap();
        assert_eq!(guided, sample_chunk(&p, &[0.2, 0.4], seed).unwrap());
    }
}

#[test]
fn linear_verifier_follows_scalar_recurrence() {
    let steps = 15;
    let sched = NoiseSchedule::linear(ScheduleParams {
        steps,
        ..ScheduleParams::default()
    })
    .unwrap();
    let g = vec![0.3, -1.2, 0.0, 2.0];
    let lambda = 0.4;
    let seed = 21;
    let model = ZeroNoise(sched.clone());
    let (out, trace) = cg_sample(&model, &Linear(g.clone()), &[0.0, 0.0], 0, lambda, None, seed).unwrap();

    // Independent recurrence on the schedule's β table.
    let betas: Vec<f64> = (1..=steps).map(|k| sched.beta(k)).collect();
    let mut abar = vec![1.0];
    for b in &betas {
        let prev = *abar.last().unwrap();
        abar.push(prev * (1.0 - b));
    }
    let mut r = rng::rng(seed);
    let mut draw = || -> f64 { r.sample(rand_distr::StandardNormal) };
    let mut x: Vec<f64> = (0..4).map(|_| draw()).collect();
    for k in (1..=steps).rev() {
        let z: Vec<f64> = if k > 1 { (0..4).map(|_| draw()).collect() } else { vec![0.0; 4] };
        let (ab, ab_prev, beta) = (abar[k], abar[k - 1], betas[k - 1]);
        let c_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let c_xt = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
        x = (0..4)
            .map(|i| {
                let x0 = x[i] / ab.sqrt() + lambda * g[i];
                c_x0 * x0 + c_xt * x[i] + sigma * z[i]
            })
            .collect();
    }
    for (a, b) in out.iter().zip(&x) {
        assert!((a - b).abs() < 1e-10 * b.abs().max(1.0), "{a} vs {b}");
    }
    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert_eq!(trace.perturbation_norms.len(), steps);
    assert!(trace.perturbation_norms.iter().all(|&n| (n - lambda * gn).abs() < 1e-12));
}

#[test]
fn norm_cap_limits_perturbation() {
    let sched = NoiseSchedule::linear(ScheduleParams {
        steps: 5,
        ..ScheduleParams::default()
    })
    .unwrap();
    let model = ZeroNoise(sched);
    let (_, trace) = cg_sample(&model, &Linear(vec![3.0, 4.0, 0.0, 0.0]), &[0.0, 0.0], 0, 1.0, Some(0.5), 1).unwrap();
    assert!(trace.perturbation_norms.iter().all(|&n| (n - 0.5).abs() < 1e-12));
}

#[test]
fn single_candidate_best_of_n_is_base_sampling() {
    let p = policy(4, 20);
    let v = verifier(VerifierKind::Classifier, 5);
    for seed in 0..20u64 {
        let state = [0.3, 0.2 + 0.02 * seed as f64];
        let choice = bon_select(&p, &v, &state, 2, 1, seed).unwrap();
        assert_eq!(choice.index, 0);
        assert_eq!(choice.chunk, sample_chunk(&p, &state, rng::substream(seed, 0)).unwrap());
        assert_eq!(choice.chunk, p.choose(&state, 2, seed).unwrap());
    }
}

#[test]
fn best_of_n_picks_the_highest_score() {
    let p = policy(6, 20);
    let v = verifier(VerifierKind::TimeToSuccess, 7);
    let choice = bon_select(&p, &v, &[0.4, 0.6], 0, 30, 9).unwrap();
    let candidates = sample_n_chunks(&p, &[0.4, 0.6], 30, 9).unwrap();
    assert_eq!(choice.scores.len(), 30);
    assert_eq!(choice.chunk, candidates[choice.index]);
    assert!(choice.scores.iter().all(|&s| s <= choice.scores[choice.index]));
    assert!(bon_select(&p, &v, &[0.4, 0.6], 0, 0, 9).is_err());
}

#[test]
fn unsteered_modes_reproduce_base_rollouts() {
    let env = NavEnv::new(EnvConfig::default()).unwrap();
    let p = policy(8, 10);
    let v = verifier(VerifierKind::Classifier, 9);
    for seed in 0..5 {
        let base = run_episode(
            &p,
            &env,
            seed,
            TrajectoryMeta {
                policy: p.digest().to_string(),
                seed,
                episode: 0,
            },
        )
        .unwrap();
        let none = steered_rollout(&p, None, &env, SteeringMode::None, seed).unwrap();
        let bon1 = steered_rollout(&p, Some(&v), &env, SteeringMode::BestOfN { n: 1 }, seed).unwrap();
        let cg0 = steered_rollout(
            &p,
            Some(&v),
            &env,
            SteeringMode::Guidance {
                lambda: 0.0,
                max_norm: None,
            },
            seed,
        )
        .unwrap();
        assert_eq!(none, base);
        assert_eq!(bon1, base);
        assert_eq!(cg0, base);
        assert!(base.transitions.iter().enumerate().all(|(i, tr)| tr.t == i));
    }
}

#[test]
fn steering_without_verifier_is_rejected() {
    let p = policy(10, 5);
    assert!(SteeredPolicy::new(&p, None, SteeringMode::BestOfN { n: 4 }).is_err());
    assert!(SteeredPolicy::new(&p, None, SteeringMode::None).is_ok());
}

#[test]
fn diagnostics_are_keyed_by_chunk() {
    let env = NavEnv::new(EnvConfig::default()).unwrap();
    let p = policy(11, 5);
    let v = verifier(VerifierKind::Classifier, 12);
    let steered = SteeredPolicy::new(&p, Some(&v), SteeringMode::BestOfN { n: 5 })
        .unwrap()
        .with_diagnostics();
    let traj = run_episode(&steered, &env, 3, TrajectoryMeta::default()).unwrap();
    let diags = steered.take_diagnostics();
    assert_eq!(diags.len(), traj.len());
    for tr in &traj.transitions {
        let d = &diags[&rng::substream(3, tr.t as u64)];
        assert_eq!(d.t, tr.t);
        assert_eq!(d.state, tr.state);
        assert_eq!(d.candidate_scores.as_ref().unwrap().len(), 5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn argmax_survives_increasing_transforms(scores in prop::collection::vec(-50.0f64..50.0, 1..40), a in 0.01f64..10.0, b in -5.0f64..5.0) {
        let best = argmax_first(&scores);
        let transforms: [&dyn Fn(f64) -> f64; 4] = [
            &|x| a * x + b,
            &|x| x.powi(3),
            &|x| 1.0 / (1.0 + (-x).exp()),
            &|x| (x / 10.0).exp(),
        ];
        for f in transforms {
            let mapped: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            // Transforms can merge distinct scores in floating point only by rounding; skip those.
            let distinct = scores.iter().zip(&mapped).all(|(x, y)| {
                scores.iter().zip(&mapped).all(|(u, v)| (x < u) == (y < v) || x == u)
            });
            if distinct {
                prop_assert_eq!(argmax_first(&mapped), best);
            }
        }
    }

    #[test]
    fn best_of_n_survives_increasing_transforms(seed in 0u64..1000, n in 1usize..12, c in 0.1f64..5.0) {
        let p = policy(13, 8);
        let v = verifier(VerifierKind::TimeToSuccess, 14);
        let plain = bon_select(&p, &v, &[0.5, 0.5], 1, n, seed).unwrap();
        let scaled = Monotone(&v, move |x: f64| c * x - 1.0);
        let cubed = Monotone(&v, |x: f64| x.powi(3));
        prop_assert_eq!(bon_select(&p, &scaled, &[0.5, 0.5], 1, n, seed).unwrap().index, plain.index);
        prop_assert_eq!(bon_select(&p, &cubed, &[0.5, 0.5], 1, n, seed).unwrap().index, plain.index);
    }
}
