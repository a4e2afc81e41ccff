//! DDPM noise schedule and the forward/reverse arithmetic on flat vectors.
//!
//! Diffusion steps are 1-based: `t ∈ 1..=K`. `ᾱ_0 = 1` by convention, which
//! makes `σ_1 = 0` and the posterior mean at `t = 1` equal to `x̂₀`.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_min: 1e-4,
            // With only 100 steps, 0.02 leaves ᾱ_K ≈ 0.36; 0.1 brings it under 0.01.
            beta_max: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced `β` from `beta_min` to `beta_max` over `steps` steps.
    pub fn linear(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            steps,
            beta_min,
            beta_max,
        } = params;
        if steps == 0 {
            return Err(CoreError::Config("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(CoreError::Config(format!(
                "beta range must satisfy 0 < {beta_min} <= {beta_max} < 1"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])).sqrt()
            })
            .collect();
        Ok(Self {
            params,
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(CoreError::DiffusionStep {
                step: t,
                max: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// `ᾱ_{t-1}`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    /// Posterior standard deviation `σ_t = sqrt(β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t))`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Closed-form forward marginal `√ᾱ_t x₀ + √(1-ᾱ_t) ε`.
    pub fn q_sample(&self, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        let i = self.idx(t)?;
        same_len(x0, noise)?;
        let (a, b) = (self.alpha_bars[i].sqrt(), (1.0 - self.alpha_bars[i]).sqrt());
        Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
    }

    /// Clean-sample estimate `x̂₀ = (x_t - √(1-ᾱ_t) ε̂) / √ᾱ_t`.
    pub fn predict_x0(&self, x_t: &[f64], t: usize, eps_hat: &[f64]) -> Result<Vec<f64>> {
        let i = self.idx(t)?;
        same_len(x_t, eps_hat)?;
        let (a, b) = (self.alpha_bars[i].sqrt(), (1.0 - self.alpha_bars[i]).sqrt());
        Ok(x_t.iter().zip(eps_hat).map(|(x, e)| (x - b * e) / a).collect())
    }

    /// One ancestral DDPM step:
    /// `x_{t-1} = (x_t - (1-α_t)/√(1-ᾱ_t) ε̂) / √α_t + σ_t z`.
    pub fn reverse_step(&self, x_t: &[f64], t: usize, eps_hat: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let i = self.idx(t)?;
        same_len(x_t, eps_hat)?;
        same_len(x_t, z)?;
        let coef = (1.0 - self.alphas[i]) / (1.0 - self.alpha_bars[i]).sqrt();
        let inv = 1.0 / self.alphas[i].sqrt();
        let sigma = self.sigmas[i];
        Ok(x_t
            .iter()
            .zip(eps_hat)
            .zip(z)
            .map(|((x, e), zv)| inv * (x - coef * e) + sigma * zv)
            .collect())
    }

    /// Posterior mean of `q(x_{t-1} | x_t, x̂₀)`:
    /// `√ᾱ_{t-1} β_t / (1-ᾱ_t) · x̂₀ + √α_t (1-ᾱ_{t-1}) / (1-ᾱ_t) · x_t`.
    pub fn posterior_mean_from_x0(&self, x_t: &[f64], x0_hat: &[f64], t: usize) -> Result<Vec<f64>> {
        let i = self.idx(t)?;
        same_len(x_t, x0_hat)?;
        if t == 1 {
            return Ok(x0_hat.to_vec());
        }
        let prev = self.alpha_bar_prev(t);
        let denom = 1.0 - self.alpha_bars[i];
        let c0 = prev.sqrt() * self.betas[i] / denom;
        let ct = self.alphas[i].sqrt() * (1.0 - prev) / denom;
        Ok(x_t
            .iter()
            .zip(x0_hat)
            .map(|(x, x0)| c0 * x0 + ct * x)
            .collect())
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(CoreError::Shape(format!(
            "operand lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(steps: usize, lo: f64, hi: f64) -> NoiseSchedule {
        NoiseSchedule::linear(ScheduleParams {
            steps,
            beta_min: lo,
            beta_max: hi,
        })
        .unwrap()
    }

    #[test]
    fn two_step_alpha_bars() {
        let s = sched(2, 0.1, 0.2);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert_eq!(sched(1, 0.5, 0.5).alpha_bars(), &[0.5]);
    }

    #[test]
    fn default_schedule_nearly_destroys_signal() {
        let s = NoiseSchedule::linear(ScheduleParams::default()).unwrap();
        assert_eq!(s.steps(), 100);
        assert!(s.alpha_bar(100) < 0.01);
        for t in 2..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn conventional_thousand_step_range_is_too_gentle_for_100_steps() {
        let s = sched(100, 1e-4, 0.02);
        let direct: f64 = (0..100)
            .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 99.0))
            .product();
        assert!((s.alpha_bar(100) - direct).abs() < 1e-14);
        assert!((s.alpha_bar(100) - 0.363_563_248).abs() < 1e-8);
    }

    #[test]
    fn rejects_invalid_ranges() {
        for (k, lo, hi) in [(0, 0.1, 0.2), (3, 0.0, 0.2), (3, 0.3, 0.2), (3, 0.1, 1.0)] {
            assert!(NoiseSchedule::linear(ScheduleParams {
                steps: k,
                beta_min: lo,
                beta_max: hi
            })
            .is_err());
        }
    }

    #[test]
    fn step_range_checked() {
        let s = sched(2, 0.1, 0.2);
        assert!(matches!(
            s.q_sample(&[1.0], 3, &[0.0]),
            Err(CoreError::DiffusionStep { step: 3, max: 2 })
        ));
        assert!(s.q_sample(&[1.0], 0, &[0.0]).is_err());
        assert!(s.q_sample(&[1.0], 1, &[0.0, 1.0]).is_err());
    }

    // Schedule with ᾱ_1 = 0.81 (single step, β = 0.19).
    fn s081() -> NoiseSchedule {
        sched(1, 0.19, 0.19)
    }

    #[test]
    fn q_sample_values() {
        let s = s081();
        assert!((s.q_sample(&[1.0], 1, &[0.0]).unwrap()[0] - 0.9).abs() < 1e-15);
        let e = 0.37;
        assert!((s.q_sample(&[0.0], 1, &[e]).unwrap()[0] - 0.19f64.sqrt() * e).abs() < 1e-15);
        assert!((s.q_sample(&[1.0], 1, &[1.0]).unwrap()[0] - 1.335_889_894_354_067_4).abs() < 1e-12);
    }

    #[test]
    fn predict_x0_values() {
        let s = sched(1, 0.75, 0.75); // ᾱ = 0.25
        assert!((s.predict_x0(&[0.4], 1, &[0.0]).unwrap()[0] - 0.8).abs() < 1e-15);
        let v = s.predict_x0(&[1.0], 1, &[0.5]).unwrap()[0];
        assert!((v - (1.0 - 0.75f64.sqrt() * 0.5) / 0.5).abs() < 1e-15);
        assert!((v - 1.13397).abs() < 1e-5);
    }

    #[test]
    fn reverse_step_values() {
        // t = 2 of a schedule with α_2 = 0.9 and ᾱ_2 = 0.81 (β = [0.1, 0.1]).
        let s = sched(2, 0.1, 0.1);
        assert!((s.alpha_bar(2) - 0.81).abs() < 1e-15);
        let v = s.reverse_step(&[1.0], 2, &[0.0], &[0.0]).unwrap()[0];
        assert!((v - 1.0 / 0.9f64.sqrt()).abs() < 1e-15);
        let v = s.reverse_step(&[1.0], 2, &[1.0], &[0.0]).unwrap()[0];
        assert!((v - (1.0 - 0.1 / 0.19f64.sqrt()) / 0.9f64.sqrt()).abs() < 1e-15);
        assert!((v - 0.812_267_136_686).abs() < 1e-11);
        // σ_1 = 0: noise is ignored on the last step.
        let a = s.reverse_step(&[0.3], 1, &[0.2], &[0.0]).unwrap();
        let b = s.reverse_step(&[0.3], 1, &[0.2], &[5.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn posterior_mean_conventions() {
        let s = sched(3, 0.1, 0.3);
        assert_eq!(s.posterior_mean_from_x0(&[0.7], &[0.2], 1).unwrap(), vec![0.2]);
    }

    #[test]
    fn posterior_mean_matches_reverse_step() {
        let s = NoiseSchedule::linear(ScheduleParams::default()).unwrap();
        let x = [0.4, -1.3, 2.2];
        let eps = [0.1, 0.7, -0.5];
        let z = [0.3, -0.2, 1.1];
        for t in [1, 2, 17, 50, 100] {
            let direct = s.reverse_step(&x, t, &eps, &z).unwrap();
            let x0 = s.predict_x0(&x, t, &eps).unwrap();
            let mu = s.posterior_mean_from_x0(&x, &x0, t).unwrap();
            for i in 0..3 {
                let via = mu[i] + s.sigma(t) * z[i];
                assert!((via - direct[i]).abs() < 1e-10, "t={t}");
            }
        }
    }

    #[test]
    fn predict_x0_inverts_q_sample() {
        let s = NoiseSchedule::linear(ScheduleParams::default()).unwrap();
        let x0 = [0.25, -0.75];
        let e = [1.5, -0.3];
        for t in [1, 40, 100] {
            let xt = s.q_sample(&x0, t, &e).unwrap();
            let back = s.predict_x0(&xt, t, &e).unwrap();
            assert!(back.iter().zip(&x0).all(|(a, b)| (a - b).abs() < 1e-10));
        }
    }
}
