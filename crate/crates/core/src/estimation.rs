//! GMM recovery of `(λ², H)` (and optionally `T`) from autocovariances at a set of lags.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{sfbm_kernel_eval, SfbmParams};
use crate::rff::FeatureSet;
use crate::stats;

/// Distinct values of `⌊2^{k/2}⌋` for `k = 0..=q`, increasing.
pub fn default_lags(q: usize) -> Vec<f64> {
    let mut lags: Vec<f64> = (0..=q).map(|k| 2f64.powf(k as f64 / 2.0).floor()).collect();
    lags.dedup();
    lags
}

/// `K̂_M(τ)` at each lag.
pub fn observed_cov_from_features(features: &FeatureSet, lags: &[f64]) -> Result<Vec<f64>> {
    lags.iter().map(|&tau| features.kernel_estimate_scalar(tau)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TMode {
    Fixed(f64),
    Free { lower: f64, upper: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    /// Simplex diameter in unit-box coordinates below which a run stops.
    pub x_tol: f64,
    /// Relative spread of objective values below which a run stops.
    pub f_tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { max_iters: 4000, x_tol: 1e-10, f_tol: 1e-14, restarts: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    /// `None` means the identity.
    pub weight_matrix: Option<Vec<Vec<f64>>>,
    pub lambda2_bounds: (f64, f64),
    pub h_bounds: (f64, f64),
    pub optimizer: OptimizerConfig,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            weight_matrix: None,
            lambda2_bounds: (1e-6, 1.0),
            h_bounds: (1e-4, 0.5 - 1e-4),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl GmmConfig {
    fn validate(&self, q: usize) -> Result<()> {
        let (l0, l1) = self.lambda2_bounds;
        let (h0, h1) = self.h_bounds;
        if !(l0 > 0.0 && l1 > l0) || !(h0 > 0.0 && h1 > h0 && h1 < 0.5) {
            return Err(Error::Config("invalid feasible box".into()));
        }
        if self.optimizer.restarts == 0 || self.optimizer.max_iters == 0 {
            return Err(Error::Config("optimizer needs at least one restart and one iteration".into()));
        }
        if let Some(w) = &self.weight_matrix {
            if w.len() != q || w.iter().any(|r| r.len() != q) {
                return Err(Error::DimensionMismatch { expected: q, got: w.len() });
            }
            for i in 0..q {
                for j in 0..i {
                    if (w[i][j] - w[j][i]).abs() > 1e-12 * (w[i][j].abs() + w[j][i].abs()) {
                        return Err(Error::Config("weight matrix must be symmetric".into()));
                    }
                }
            }
            if !is_positive_definite_matrix(w) {
                return Err(Error::Config("weight matrix must be positive definite".into()));
            }
        }
        Ok(())
    }
}

fn is_positive_definite_matrix(w: &[Vec<f64>]) -> bool {
    let n = w.len();
    let mut l = vec![vec![0.0; n]; n];
    for j in 0..n {
        let d = w[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if !(d > 0.0) {
            return false;
        }
        l[j][j] = d.sqrt();
        for i in j + 1..n {
            l[i][j] = (w[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>()) / l[j][j];
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmResult {
    pub lambda2_hat: f64,
    pub h_hat: f64,
    pub t_hat: Option<f64>,
    pub objective_value: f64,
    pub converged: bool,
    pub n_restarts_used: usize,
    /// Objective at each multistart's initial point.
    pub initial_objectives: Vec<f64>,
}

struct Objective<'a> {
    observed: &'a [f64],
    lags: &'a [f64],
    weight: Option<&'a [Vec<f64>]>,
    bounds: Vec<(f64, f64)>,
    t_fixed: Option<f64>,
}

impl Objective<'_> {
    fn to_params(&self, u: &[f64]) -> (f64, f64, f64) {
        let map = |i: usize| {
            let (lo, hi) = self.bounds[i];
            lo + u[i] * (hi - lo)
        };
        let t = self.t_fixed.unwrap_or_else(|| map(2));
        (map(0), map(1), t)
    }

    fn value(&self, u: &[f64]) -> f64 {
        let (lambda2, h, t) = self.to_params(u);
        let params = SfbmParams { h, lambda2, t, d: 1 };
        let resid: Vec<f64> =
            self.observed.iter().zip(self.lags).map(|(c, &tau)| c - sfbm_kernel_eval(&params, tau)).collect();
        match self.weight {
            None => resid.iter().map(|r| r * r).sum(),
            Some(w) => {
                let mut s = 0.0;
                for (i, ri) in resid.iter().enumerate() {
                    for (j, rj) in resid.iter().enumerate() {
                        s += ri * w[i][j] * rj;
                    }
                }
                s
            }
        }
    }
}

/// Folds a coordinate back into `[0, 1]` by reflection at the faces.
fn reflect_into_unit(v: f64) -> f64 {
    let mut x = v.rem_euclid(2.0);
    if x > 1.0 {
        x = 2.0 - x;
    }
    x
}

struct NelderMeadRun {
    best: Vec<f64>,
    value: f64,
    converged: bool,
}

fn nelder_mead<F: Fn(&[f64]) -> f64>(f: &F, start: &[f64], scale: f64, cfg: &OptimizerConfig) -> NelderMeadRun {
    let n = start.len();
    let project = |p: Vec<f64>| -> Vec<f64> { p.into_iter().map(reflect_into_unit).collect() };
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += if p[i] + scale <= 1.0 { scale } else { -scale };
        simplex.push(project(p));
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let diameter = simplex[1..]
            .iter()
            .map(|p| p.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        let spread = values[n] - values[0];
        if diameter < cfg.x_tol || spread <= cfg.f_tol * values[0].abs() {
            converged = true;
            break;
        }

        let centroid: Vec<f64> =
            (0..n).map(|j| simplex[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> {
            project(centroid.iter().zip(&simplex[n]).map(|(c, w)| c + t * (c - w)).collect())
        };
        let xr = along(1.0);
        let fr = f(&xr);
        if fr < values[0] {
            let xe = along(2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                let xc = along(0.5);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = along(-0.5);
                let fc = f(&xc);
                (xc, fc)
            };
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    let p: Vec<f64> = simplex[0].iter().zip(&simplex[i]).map(|(b, x)| b + 0.5 * (x - b)).collect();
                    values[i] = f(&p);
                    simplex[i] = p;
                }
            }
        }
    }
    let best_idx = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    NelderMeadRun { best: simplex[best_idx].clone(), value: values[best_idx], converged }
}

/// Minimizes `(Ĉ − C(x))ᵀ W (Ĉ − C(x))` over the feasible box by Nelder–Mead with
/// reflection at the box faces, from `restarts` deterministic starting points.
/// Each run is polished by one restart from its own optimum.
pub fn gmm_estimate(observed: &[f64], lags: &[f64], t_mode: TMode, cfg: &GmmConfig) -> Result<GmmResult> {
    if observed.len() != lags.len() {
        return Err(Error::DimensionMismatch { expected: lags.len(), got: observed.len() });
    }
    if lags.len() < 2 {
        return Err(Error::Config("GMM needs at least two lags".into()));
    }
    cfg.validate(lags.len())?;
    let mut bounds = vec![cfg.lambda2_bounds, cfg.h_bounds];
    let t_fixed = match t_mode {
        TMode::Fixed(t) => {
            if !(t > 0.0) {
                return Err(Error::Config(format!("T must be positive, got {t}")));
            }
            Some(t)
        }
        TMode::Free { lower, upper } => {
            if !(lower > 0.0 && upper > lower) {
                return Err(Error::Config("invalid T bounds".into()));
            }
            bounds.push((lower, upper));
            None
        }
    };
    let dim = bounds.len();
    let obj = Objective { observed, lags, weight: cfg.weight_matrix.as_deref(), bounds, t_fixed };
    let f = |u: &[f64]| obj.value(u);

    let opt = &cfg.optimizer;
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut best: Option<NelderMeadRun> = None;
    let mut initial_objectives = Vec::with_capacity(opt.restarts);
    for r in 0..opt.restarts {
        // Stratified in H, random in the other coordinates.
        let mut start: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        start[1] = (r as f64 + rng.random::<f64>()) / opt.restarts as f64;
        initial_objectives.push(f(&start));
        let first = nelder_mead(&f, &start, 0.1, opt);
        let polished = nelder_mead(&f, &first.best, 0.01, opt);
        let run = if polished.value <= first.value { polished } else { first };
        if best.as_ref().is_none_or(|b| run.value < b.value) {
            best = Some(run);
        }
    }
    let best = best.unwrap();
    let (lambda2_hat, h_hat, t) = obj.to_params(&best.best);
    Ok(GmmResult {
        lambda2_hat,
        h_hat,
        t_hat: t_fixed.is_none().then_some(t),
        objective_value: best.value.max(0.0),
        converged: best.converged,
        n_restarts_used: opt.restarts,
        initial_objectives,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateProbeReport {
    pub ms: Vec<usize>,
    /// RMS of `‖θ̂_M − θ*‖` over trials, per `M`.
    pub rms_error: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `√(Q/M)`, the shape of the theoretical bound (its constant is unknown).
    pub bound_shape: Vec<f64>,
}

/// Fits the log-log slope of the RMS estimation error against `M`. `estimate_at(M, trial)`
/// returns one estimate `(λ̂², Ĥ)`.
pub fn gmm_rate_probe<F: Fn(usize, usize) -> Result<(f64, f64)> + Sync>(
    ms: &[usize],
    q: usize,
    trials: usize,
    truth: (f64, f64),
    estimate_at: F,
) -> Result<RateProbeReport> {
    if ms.len() < 2 {
        return Err(Error::Config("rate probe needs at least two values of M".into()));
    }
    if ms.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("M values must be increasing".into()));
    }
    if trials < 2 {
        return Err(Error::Config("rate probe needs at least two trials".into()));
    }
    let mut rms_error = Vec::with_capacity(ms.len());
    for &m in ms {
        let mut sq = 0.0;
        for trial in 0..trials {
            let (l2, h) = estimate_at(m, trial)?;
            sq += (l2 - truth.0).powi(2) + (h - truth.1).powi(2);
        }
        rms_error.push((sq / trials as f64).sqrt());
    }
    let x: Vec<f64> = ms.iter().map(|&m| (m as f64).ln()).collect();
    let y: Vec<f64> = rms_error.iter().map(|e| e.ln()).collect();
    let fit = stats::linear_fit(&x, &y)?;
    Ok(RateProbeReport {
        ms: ms.to_vec(),
        rms_error,
        slope: fit.slope,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
        bound_shape: ms.iter().map(|&m| (q as f64 / m as f64).sqrt()).collect(),
    })
}

/// `√(Q/M)` for the given number of lags.
pub fn theoretical_bound_shape(q: usize, m: usize) -> f64 {
    (q as f64 / m as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact_moments(params: &SfbmParams, lags: &[f64]) -> Vec<f64> {
        lags.iter().map(|&t| sfbm_kernel_eval(params, t)).collect()
    }

    #[test]
    fn lag_sequences() {
        assert_eq!(default_lags(4), vec![1.0, 2.0, 4.0]);
        assert_eq!(*default_lags(19).last().unwrap(), 724.0);
        assert_eq!(default_lags(0), vec![1.0]);
    }

    #[test]
    fn observed_covariance_delegates_to_estimator() {
        let fs = FeatureSet::new(1, vec![0.0; 3], 2.0, 0).unwrap();
        assert_eq!(observed_cov_from_features(&fs, &[0.0, 1.0, 5.0]).unwrap(), vec![2.0; 3]);
        let fs = FeatureSet::new(1, vec![0.1, 0.7], 1.5, 0).unwrap();
        let lags = default_lags(6);
        let obs = observed_cov_from_features(&fs, &lags).unwrap();
        for (o, &l) in obs.iter().zip(&lags) {
            assert_eq!(*o, fs.kernel_estimate_scalar(l).unwrap());
        }
    }

    #[test]
    fn exact_moments_are_recovered() {
        let truth = SfbmParams::new(0.1, 0.02, 100.0, 1).unwrap();
        let lags = default_lags(19);
        let obs = exact_moments(&truth, &lags);
        let res = gmm_estimate(&obs, &lags, TMode::Fixed(100.0), &GmmConfig::default()).unwrap();
        assert!((res.h_hat - 0.1).abs() <= 1e-4, "{res:?}");
        assert!((res.lambda2_hat - 0.02).abs() <= 1e-5, "{res:?}");
        assert!(res.objective_value <= 1e-12);
        assert!(res.initial_objectives.iter().all(|&v| res.objective_value <= v));
    }

    #[test]
    fn free_t_mode_reports_t() {
        let truth = SfbmParams::new(0.2, 0.05, 150.0, 1).unwrap();
        let lags = default_lags(19);
        let obs = exact_moments(&truth, &lags);
        let mode = TMode::Free { lower: 50.0, upper: 400.0 };
        let res = gmm_estimate(&obs, &lags, mode, &GmmConfig::default()).unwrap();
        assert!(res.t_hat.is_some());
        assert!(res.objective_value < 1e-8, "{res:?}");
    }

    #[test]
    fn scaling_the_weight_matrix_keeps_the_argmin() {
        let truth = SfbmParams::new(0.3, 0.1, 100.0, 1).unwrap();
        let lags = default_lags(12);
        let mut obs = exact_moments(&truth, &lags);
        for (i, o) in obs.iter_mut().enumerate() {
            *o += 0.01 * ((i * 7 % 5) as f64 - 2.0);
        }
        let q = lags.len();
        let w: Vec<Vec<f64>> = (0..q).map(|i| (0..q).map(|j| if i == j { 1.0 + i as f64 } else { 0.0 }).collect()).collect();
        let mut cfg = GmmConfig { weight_matrix: Some(w.clone()), ..Default::default() };
        let a = gmm_estimate(&obs, &lags, TMode::Fixed(100.0), &cfg).unwrap();
        cfg.weight_matrix = Some(w.iter().map(|r| r.iter().map(|v| 3.5 * v).collect()).collect());
        let b = gmm_estimate(&obs, &lags, TMode::Fixed(100.0), &cfg).unwrap();
        assert!((a.h_hat - b.h_hat).abs() <= 1e-8 && (a.lambda2_hat - b.lambda2_hat).abs() <= 1e-8);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let lags = default_lags(6);
        assert!(gmm_estimate(&[1.0], &lags, TMode::Fixed(100.0), &GmmConfig::default()).is_err());
        let cfg = GmmConfig { weight_matrix: Some(vec![vec![1.0, 2.0], vec![2.0, 1.0]]), ..Default::default() };
        assert!(gmm_estimate(&[1.0, 1.0], &[1.0, 2.0], TMode::Fixed(10.0), &cfg).is_err());
    }

    #[test]
    fn rate_probe_needs_two_sizes_and_fits_known_rate() {
        let none = |_m: usize, _t: usize| Ok((0.02, 0.1));
        assert!(gmm_rate_probe(&[1000], 19, 10, (0.02, 0.1), none).is_err());
        // Deterministic errors proportional to M^{-1/2}.
        let synthetic = |m: usize, t: usize| {
            let s = if t % 2 == 0 { 1.0 } else { -1.0 };
            Ok((0.02 + s / (m as f64).sqrt(), 0.1))
        };
        let rep = gmm_rate_probe(&[100, 400, 1600], 19, 10, (0.02, 0.1), synthetic).unwrap();
        assert!((rep.slope + 0.5).abs() < 1e-12);
        assert!(theoretical_bound_shape(38, 1000) >= theoretical_bound_shape(19, 1000));
    }
}
