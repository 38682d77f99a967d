//! Hamiltonian Monte Carlo with a diagonal mass matrix and leapfrog integration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// An unnormalized log-density with its gradient.
pub trait LogDensity {
    fn dim(&self) -> usize;

    /// Returns `log π(x)` and writes `∇ log π(x)` into `grad`.
    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

/// Adapts a closure `(x, grad) -> log π(x)` to [`LogDensity`].
pub struct FnDensity<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64]) -> f64> FnDensity<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnDensity { dim, f }
    }
}

impl<F: Fn(&[f64], &mut [f64]) -> f64> LogDensity for FnDensity<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        (self.f)(x, grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub epsilon: f64,
    pub leapfrog_steps: usize,
    pub mass_diag: Vec<f64>,
    pub n_samples: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub init: Vec<f64>,
    /// Adjust ε by ×1.1 / ×0.9 over the first half of burn-in.
    pub tune: bool,
}

impl HmcConfig {
    pub fn new(dim: usize, n_samples: usize, seed: u64) -> Self {
        HmcConfig {
            epsilon: 0.2,
            leapfrog_steps: 10,
            mass_diag: vec![1.0; dim],
            n_samples,
            burn_in: 1000,
            thin: 5,
            seed,
            init: vec![0.0; dim],
            tune: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.leapfrog_steps == 0 {
            return Err(Error::Config("leapfrog_steps must be at least 1".into()));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.mass_diag.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::Config("mass_diag entries must be positive".into()));
        }
        if self.mass_diag.len() != self.init.len() {
            return Err(Error::DimensionMismatch { expected: self.init.len(), got: self.mass_diag.len() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcChain {
    pub samples: Vec<Vec<f64>>,
    /// Acceptance over the post-burn-in iterations.
    pub acceptance_rate: f64,
    /// Acceptance over the burn-in iterations (before and during tuning).
    pub burn_in_acceptance_rate: f64,
    /// `H(proposal) − H(current)` for each post-burn-in proposal.
    pub energy_errors: Vec<f64>,
    pub tuned_epsilon: f64,
    /// Proposals rejected because the trajectory produced a non-finite value.
    pub divergences: usize,
}

/// End state of a leapfrog trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct LeapfrogState {
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
    pub log_density: f64,
    pub grad: Vec<f64>,
}

/// Runs `L` leapfrog steps of size ε from `(position, momentum)` for the potential
/// `U = −log π`: half kick, then `L` drifts separated by full kicks, a final half kick,
/// and a momentum flip. `grad` must hold `∇ log π(position)`. Returns `None` if any
/// intermediate value is non-finite.
pub fn leapfrog<T: LogDensity + ?Sized>(
    target: &T,
    position: &[f64],
    momentum: &[f64],
    grad: &[f64],
    epsilon: f64,
    steps: usize,
    mass_diag: &[f64],
) -> Option<LeapfrogState> {
    let mut x = position.to_vec();
    let mut p = momentum.to_vec();
    let mut g = grad.to_vec();
    let mut logp = 0.0;
    for (pi, gi) in p.iter_mut().zip(&g) {
        *pi += 0.5 * epsilon * gi;
    }
    for l in 1..=steps {
        for ((xi, pi), mi) in x.iter_mut().zip(&p).zip(mass_diag) {
            *xi += epsilon * pi / mi;
        }
        logp = target.log_density_and_grad(&x, &mut g);
        if !logp.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let kick = if l < steps { epsilon } else { 0.5 * epsilon };
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi += kick * gi;
        }
    }
    for pi in p.iter_mut() {
        *pi = -*pi;
    }
    if p.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(LeapfrogState { position: x, momentum: p, log_density: logp, grad: g })
}

fn kinetic(p: &[f64], mass_diag: &[f64]) -> f64 {
    p.iter().zip(mass_diag).map(|(pi, mi)| 0.5 * pi * pi / mi).sum()
}

/// Draws `n_samples` states after `burn_in` iterations, keeping every `thin`-th.
pub fn hmc_sample<T: LogDensity + ?Sized>(target: &T, cfg: &HmcConfig) -> Result<HmcChain> {
    cfg.validate()?;
    let dim = target.dim();
    if cfg.init.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: cfg.init.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = cfg.init.clone();
    let mut grad = vec![0.0; dim];
    let mut logp = target.log_density_and_grad(&x, &mut grad);
    if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Config("target log-density is not finite at the initial point".into()));
    }
    let mut eps = cfg.epsilon;
    let mass = &cfg.mass_diag;
    let tune_until = if cfg.tune { cfg.burn_in / 2 } else { 0 };
    const WINDOW: usize = 20;
    let mut window_accepts = 0usize;
    let mut window_len = 0usize;
    let mut burn_accepts = 0usize;
    let mut accepts = 0usize;
    let mut divergences = 0usize;
    let total = cfg.burn_in + cfg.n_samples * cfg.thin;
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut energy_errors = Vec::with_capacity(cfg.n_samples * cfg.thin);
    let mut p = vec![0.0; dim];
    for iter in 0..total {
        for (pi, mi) in p.iter_mut().zip(mass) {
            let z: f64 = rng.sample(StandardNormal);
            *pi = mi.sqrt() * z;
        }
        let h_old = -logp + kinetic(&p, mass);
        let proposal = leapfrog(target, &x, &p, &grad, eps, cfg.leapfrog_steps, mass);
        let u: f64 = rng.random();
        let (accepted, delta) = match proposal {
            Some(state) => {
                let h_new = -state.log_density + kinetic(&state.momentum, mass);
                let delta = h_new - h_old;
                if delta.is_finite() && u < (-delta).exp().min(1.0) {
                    x = state.position;
                    grad = state.grad;
                    logp = state.log_density;
                    (true, delta)
                } else {
                    if !delta.is_finite() {
                        divergences += 1;
                    }
                    (false, delta)
                }
            }
            None => {
                divergences += 1;
                (false, f64::INFINITY)
            }
        };
        if iter < cfg.burn_in {
            burn_accepts += accepted as usize;
            if iter < tune_until {
                window_accepts += accepted as usize;
                window_len += 1;
                if window_len == WINDOW {
                    let rate = window_accepts as f64 / WINDOW as f64;
                    if rate < 0.6 {
                        eps *= 0.9;
                    } else if rate > 0.9 {
                        eps *= 1.1;
                    }
                    window_accepts = 0;
                    window_len = 0;
                }
            }
        } else {
            accepts += accepted as usize;
            energy_errors.push(delta);
            if (iter - cfg.burn_in + 1) % cfg.thin == 0 {
                samples.push(x.clone());
            }
        }
    }
    let post = (total - cfg.burn_in).max(1);
    Ok(HmcChain {
        samples,
        acceptance_rate: accepts as f64 / post as f64,
        burn_in_acceptance_rate: if cfg.burn_in > 0 { burn_accepts as f64 / cfg.burn_in as f64 } else { f64::NAN },
        energy_errors,
        tuned_epsilon: eps,
        divergences,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    /// Autocorrelations at lags 0..=min(1000, n/10).
    pub autocorrelations: Vec<f64>,
    pub ess: f64,
    /// Geometric decay rate fitted to the positive head of the autocorrelations.
    pub rho_hat: f64,
    /// Set when the series has zero variance.
    pub degenerate: bool,
}

/// Diagnostics of `test_fn` applied along the chain.
pub fn chain_diagnostics<F: Fn(&[f64]) -> f64>(chain: &HmcChain, test_fn: F) -> ChainDiagnostics {
    let values: Vec<f64> = chain.samples.iter().map(|s| test_fn(s)).collect();
    series_diagnostics(&values)
}

/// Autocorrelations, initial-positive-sequence ESS and fitted decay rate of a scalar series.
pub fn series_diagnostics(values: &[f64]) -> ChainDiagnostics {
    let n = values.len();
    let var = if n > 0 {
        let m = stats::mean(values);
        values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64
    } else {
        0.0
    };
    if n < 2 || !(var > 0.0) {
        return ChainDiagnostics { autocorrelations: vec![1.0], ess: n as f64, rho_hat: 0.0, degenerate: true };
    }
    let mean = stats::mean(values);
    let centered: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let max_lag = 1000.min(n / 10).max(1);
    let mut acf = Vec::with_capacity(max_lag + 1);
    for lag in 0..=max_lag {
        let s: f64 = centered[..n - lag].iter().zip(&centered[lag..]).map(|(a, b)| a * b).sum();
        acf.push(s / (n as f64 * var));
    }
    // Geyer's initial positive sequence on pair sums Γ_m = ρ_{2m} + ρ_{2m+1}.
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut m = 0;
    while 2 * m + 1 < acf.len() {
        let pair = acf[2 * m] + acf[2 * m + 1];
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        m += 1;
    }
    let tau = tau.max(1.0 / n as f64);
    let ess = (n as f64 / tau).min(n as f64 * 10.0);
    // Least squares of ln ρ_k = k ln ρ through the origin over the head with ρ_k > 0.2.
    let (mut skl, mut skk) = (0.0, 0.0);
    for (k, r) in acf.iter().enumerate().skip(1) {
        if *r <= 0.2 {
            break;
        }
        skl += k as f64 * r.ln();
        skk += (k * k) as f64;
    }
    let rho_hat = if skk > 0.0 { (skl / skk).exp() } else { acf.get(1).copied().unwrap_or(0.0).max(0.0) };
    ChainDiagnostics { autocorrelations: acf, ess, rho_hat: rho_hat.clamp(0.0, 1.0 - 1e-12), degenerate: false }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_normal() -> FnDensity<impl Fn(&[f64], &mut [f64]) -> f64> {
        FnDensity::new(1, |x: &[f64], g: &mut [f64]| {
            g[0] = -x[0];
            -0.5 * x[0] * x[0]
        })
    }

    #[test]
    fn free_flight_without_gradient() {
        let flat = FnDensity::new(2, |_x: &[f64], g: &mut [f64]| {
            g.fill(0.0);
            0.0
        });
        let s = leapfrog(&flat, &[1.0, -1.0], &[0.5, 2.0], &[0.0, 0.0], 0.1, 7, &[1.0, 4.0]).unwrap();
        assert!((s.position[0] - (1.0 + 0.7 * 0.5)).abs() < 1e-14);
        assert!((s.position[1] - (-1.0 + 0.7 * 2.0 / 4.0)).abs() < 1e-14);
        assert_eq!(s.momentum, vec![-0.5, -2.0]);
    }

    #[test]
    fn energy_error_is_second_order() {
        let t = std_normal();
        let energy = |x: f64, p: f64| 0.5 * x * x + 0.5 * p * p;
        let err = |eps: f64| {
            let steps = (1.0 / eps).round() as usize;
            let s = leapfrog(&t, &[1.0], &[0.3], &[-1.0], eps, steps, &[1.0]).unwrap();
            (energy(s.position[0], s.momentum[0]) - energy(1.0, 0.3)).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 4.0).abs() < 0.4, "ratio {ratio}");
    }

    #[test]
    fn trajectory_is_reversible() {
        let t = FnDensity::new(2, |x: &[f64], g: &mut [f64]| {
            g[0] = -x[0] - 0.3 * x[0].powi(3);
            g[1] = -2.0 * x[1];
            -0.5 * x[0] * x[0] - 0.075 * x[0].powi(4) - x[1] * x[1]
        });
        let x0 = [0.7, -0.2];
        let mut g0 = [0.0; 2];
        t.log_density_and_grad(&x0, &mut g0);
        let fwd = leapfrog(&t, &x0, &[0.4, 1.1], &g0, 0.05, 25, &[1.0, 2.0]).unwrap();
        let back = leapfrog(&t, &fwd.position, &fwd.momentum, &fwd.grad, 0.05, 25, &[1.0, 2.0]).unwrap();
        for i in 0..2 {
            assert!((back.position[i] - x0[i]).abs() < 1e-12);
        }
        assert!((back.momentum[0] - 0.4).abs() < 1e-12 && (back.momentum[1] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_marks_divergence() {
        let t = FnDensity::new(1, |x: &[f64], g: &mut [f64]| {
            g[0] = if x[0] > 1.0 { f64::NAN } else { -x[0] };
            -0.5 * x[0] * x[0]
        });
        assert!(leapfrog(&t, &[0.0], &[5.0], &[0.0], 0.5, 4, &[1.0]).is_none());
    }

    #[test]
    fn standard_normal_moments() {
        let t = std_normal();
        let mut cfg = HmcConfig::new(1, 20_000, 11);
        cfg.epsilon = 0.5;
        cfg.leapfrog_steps = 5;
        cfg.thin = 1;
        let chain = hmc_sample(&t, &cfg).unwrap();
        assert_eq!(chain.samples.len(), 20_000);
        let xs: Vec<f64> = chain.samples.iter().map(|s| s[0]).collect();
        let diag = series_diagnostics(&xs);
        let m = stats::mean(&xs);
        let v = stats::variance(&xs);
        assert!(m.abs() < 4.0 * v.sqrt() / diag.ess.sqrt(), "mean {m} ess {}", diag.ess);
        assert!((v - 1.0).abs() < 0.1, "var {v}");
        assert!(chain.acceptance_rate >= 0.5 && chain.acceptance_rate <= 0.95);
    }

    #[test]
    fn oversized_step_is_mostly_rejected_before_tuning() {
        let t = std_normal();
        let mut cfg = HmcConfig::new(1, 200, 3);
        cfg.epsilon = 10.0;
        cfg.tune = false;
        cfg.burn_in = 200;
        let chain = hmc_sample(&t, &cfg).unwrap();
        assert!(chain.burn_in_acceptance_rate < 0.1);
        assert!(chain.acceptance_rate < 0.1);
    }

    #[test]
    fn tuning_recovers_from_oversized_step() {
        let t = std_normal();
        let mut cfg = HmcConfig::new(1, 2000, 3);
        cfg.epsilon = 10.0;
        cfg.burn_in = 2000;
        let chain = hmc_sample(&t, &cfg).unwrap();
        assert!(chain.tuned_epsilon < 3.0);
        assert!(chain.acceptance_rate > 0.5);
    }

    #[test]
    fn identical_seeds_give_identical_chains() {
        let t = std_normal();
        let cfg = HmcConfig::new(1, 500, 99);
        let a = hmc_sample(&t, &cfg).unwrap();
        let b = hmc_sample(&t, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_non_finite_start() {
        let t = FnDensity::new(1, |_x: &[f64], g: &mut [f64]| {
            g[0] = 0.0;
            f64::NEG_INFINITY
        });
        assert!(hmc_sample(&t, &HmcConfig::new(1, 10, 0)).is_err());
    }

    #[test]
    fn diagnostics_of_iid_ar1_and_constant_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let iid: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let d = series_diagnostics(&iid);
        assert!(d.autocorrelations[1].abs() < 3.0 / (n as f64).sqrt());
        assert!((d.ess - n as f64).abs() < 0.1 * n as f64, "ess {}", d.ess);

        let mut ar = vec![0.0; n];
        for i in 1..n {
            let z: f64 = rng.sample(StandardNormal);
            ar[i] = 0.9 * ar[i - 1] + z;
        }
        let d = series_diagnostics(&ar);
        assert!((0.85..=0.95).contains(&d.rho_hat), "rho {}", d.rho_hat);
        assert!(d.ess < 0.2 * n as f64);

        let d = series_diagnostics(&vec![2.5; 100]);
        assert!(d.degenerate);
    }
}
