//! Experiment harness: weak and strong error of the RFF scheme against the exact-kernel
//! Euler scheme, wall-time benchmarks, log-log rate fits and the sum-of-exponentials
//! comparator.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Kernel, SfbmParams};
use crate::rff::{FeatureSet, LagGrid};
use crate::sampling::FeatureSampler;
use crate::spectral::SpectralEvalConfig;
use crate::stats::{self, LinearFit};
use crate::volterra::{
    derive_seed, euler_simulate, generate_gaussians, generate_gaussians_stream, rff_euler_simulate, TimeGrid,
    VolatilitySpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coupling {
    /// Both schemes driven by the same Gaussian draws.
    Common,
    /// The RFF scheme driven by an independent set of draws.
    Independent,
}

impl Coupling {
    pub fn name(self) -> &'static str {
        match self {
            Coupling::Common => "common",
            Coupling::Independent => "independent",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestFunction {
    /// `φ(x) = x²`.
    Square,
    /// `φ(x) = e^{−x²}`.
    GaussianBump,
}

impl TestFunction {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            TestFunction::Square => x * x,
            TestFunction::GaussianBump => (-x * x).exp(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TestFunction::Square => "square",
            TestFunction::GaussianBump => "gaussian_bump",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub params: SfbmParams,
    pub vol: VolatilitySpec,
    pub n_steps: usize,
    /// Simulation horizon `T_f`.
    pub horizon: f64,
    pub x0: f64,
    pub ms: Vec<usize>,
    pub n_paths: usize,
    pub couplings: Vec<Coupling>,
    pub p_values: Vec<f64>,
    pub phis: Vec<TestFunction>,
    pub sampler: FeatureSampler,
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    /// `T_f = 1`, `T = 200`, `ν = 1`, 100 paths, `N = 1000`, `σ(t,x) = 0.3(1 + 0.1x)`,
    /// both test functions, `p ∈ {2, 4, 6}`, `M ∈ {500, …, 32000}`.
    pub fn reference_preset(h: f64, seed: u64) -> Result<Self> {
        Ok(ExperimentConfig {
            params: SfbmParams::from_nu2(h, 1.0, 200.0, 1)?,
            vol: VolatilitySpec::affine(0.3, 0.1),
            n_steps: 1000,
            horizon: 1.0,
            x0: 0.0,
            ms: vec![500, 1000, 2000, 4000, 8000, 16000, 32000],
            n_paths: 100,
            couplings: vec![Coupling::Common, Coupling::Independent],
            p_values: vec![2.0, 4.0, 6.0],
            phis: vec![TestFunction::Square, TestFunction::GaussianBump],
            sampler: FeatureSampler::default(),
            bootstrap_resamples: 1000,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.ms.is_empty() || self.ms.windows(2).any(|w| w[1] <= w[0]) || self.ms[0] == 0 {
            return Err(Error::Config("ms must be nonempty, positive and increasing".into()));
        }
        if self.n_paths < 2 {
            return Err(Error::Config("n_paths must be at least 2".into()));
        }
        if self.p_values.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::Config("moments p must be positive".into()));
        }
        if self.n_steps == 0 || !(self.horizon > 0.0) {
            return Err(Error::Config("need n_steps ≥ 1 and a positive horizon".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakErrorRow {
    pub h: f64,
    pub m: usize,
    pub coupling: Coupling,
    pub phi: TestFunction,
    pub weak_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_phi_rff: f64,
    pub mean_phi_euler: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongErrorRow {
    pub h: f64,
    pub m: usize,
    pub p: f64,
    pub strong_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTables {
    pub weak: Vec<WeakErrorRow>,
    /// Common coupling only.
    pub strong: Vec<StrongErrorRow>,
    /// `E[X(T_f)²]` of the reference scheme.
    pub reference_second_moment: f64,
}

/// `|mean φ(x_rff) − mean φ(x_ref)|`.
pub fn weak_error(x_rff: &[f64], x_ref: &[f64], phi: TestFunction) -> f64 {
    let d: Vec<f64> = x_rff.iter().zip(x_ref).map(|(a, b)| phi.apply(*a) - phi.apply(*b)).collect();
    stats::mean(&d).abs()
}

/// `mean |x_rff − x_ref|^p`.
pub fn strong_error(x_rff: &[f64], x_ref: &[f64], p: f64) -> f64 {
    let e: Vec<f64> = x_rff.iter().zip(x_ref).map(|(a, b)| (a - b).abs().powf(p)).collect();
    stats::mean(&e)
}

const INDEPENDENT_STREAM_OFFSET: u64 = 1 << 32;

/// Terminal values of the exact-kernel Euler scheme, path `i` on Gaussian stream `i`.
fn reference_terminals(cfg: &ExperimentConfig, grid: &TimeGrid, gauss_seed: u64) -> Result<Vec<f64>> {
    (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let g = generate_gaussians_stream(grid.steps(), gauss_seed, i);
            Ok(euler_simulate(&cfg.params, &cfg.vol, grid, cfg.x0, &g)?.terminal())
        })
        .collect()
}

fn rff_terminals(
    cfg: &ExperimentConfig,
    features: &FeatureSet,
    grid: &TimeGrid,
    gauss_seed: u64,
    stream_offset: u64,
) -> Result<Vec<f64>> {
    (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let g = generate_gaussians_stream(grid.steps(), gauss_seed, stream_offset + i);
            Ok(rff_euler_simulate(features, &cfg.vol, grid, cfg.x0, &g)?.terminal())
        })
        .collect()
}

/// Weak and strong error tables over `M`, with percentile bootstrap CIs. Features for
/// the `j`-th `M` use seed `derive_seed(seed, 1, j)`; path `i` uses Gaussian stream `i`
/// (common) or `2³² + i` (independent).
pub fn run_error_experiment(cfg: &ExperimentConfig) -> Result<ErrorTables> {
    cfg.validate()?;
    let grid = TimeGrid::uniform(cfg.n_steps, cfg.horizon)?;
    let gauss_seed = derive_seed(cfg.seed, 2, 0);
    let reference = reference_terminals(cfg, &grid, gauss_seed)?;
    let second_moment = stats::mean(&reference.iter().map(|x| x * x).collect::<Vec<_>>());
    let level = 0.95;
    let mut weak = Vec::new();
    let mut strong = Vec::new();
    for (j, &m) in cfg.ms.iter().enumerate() {
        let features = cfg.sampler.sample(&cfg.params, m, SpectralEvalConfig::default(), derive_seed(cfg.seed, 1, j as u64))?;
        for &coupling in &cfg.couplings {
            let offset = match coupling {
                Coupling::Common => 0,
                Coupling::Independent => INDEPENDENT_STREAM_OFFSET,
            };
            let xm = rff_terminals(cfg, &features, &grid, gauss_seed, offset)?;
            for (k, &phi) in cfg.phis.iter().enumerate() {
                let d: Vec<f64> = xm.iter().zip(&reference).map(|(a, b)| phi.apply(*a) - phi.apply(*b)).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3, (j * 64 + k) as u64));
                let (lo, hi) = stats::bootstrap_ci(&d, |s| stats::mean(s).abs(), cfg.bootstrap_resamples, level, &mut rng);
                weak.push(WeakErrorRow {
                    h: cfg.params.h,
                    m,
                    coupling,
                    phi,
                    weak_error: stats::mean(&d).abs(),
                    ci_low: lo,
                    ci_high: hi,
                    mean_phi_rff: stats::mean(&xm.iter().map(|x| phi.apply(*x)).collect::<Vec<_>>()),
                    mean_phi_euler: stats::mean(&reference.iter().map(|x| phi.apply(*x)).collect::<Vec<_>>()),
                });
            }
            if coupling == Coupling::Common {
                for (k, &p) in cfg.p_values.iter().enumerate() {
                    let e: Vec<f64> = xm.iter().zip(&reference).map(|(a, b)| (a - b).abs().powf(p)).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 4, (j * 64 + k) as u64));
                    let (lo, hi) = stats::bootstrap_ci(&e, stats::mean, cfg.bootstrap_resamples, level, &mut rng);
                    strong.push(StrongErrorRow {
                        h: cfg.params.h,
                        m,
                        p,
                        strong_error: stats::mean(&e),
                        ci_low: lo,
                        ci_high: hi,
                    });
                }
            }
        }
    }
    Ok(ErrorTables { weak, strong, reference_second_moment: second_moment })
}

/// Weak error table over `(M, coupling, φ)`.
pub fn weak_error_experiment(cfg: &ExperimentConfig) -> Result<Vec<WeakErrorRow>> {
    Ok(run_error_experiment(cfg)?.weak)
}

/// Strong error table over `(M, p)` under common coupling.
pub fn strong_error_experiment(cfg: &ExperimentConfig) -> Result<Vec<StrongErrorRow>> {
    let mut cfg = cfg.clone();
    cfg.couplings = vec![Coupling::Common];
    Ok(run_error_experiment(&cfg)?.strong)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    RffWithSampling,
    RffPrecomputed,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::RffWithSampling => "rff_with_sampling",
            Scheme::RffPrecomputed => "rff_precomputed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub scheme: Scheme,
    pub n: usize,
    pub m: usize,
    pub runs: usize,
    pub mean_secs: f64,
    pub sd_secs: f64,
    /// `sd/mean > 0.5`.
    pub noisy: bool,
}

#[derive(Debug, Clone)]
pub struct TimingConfig {
    pub params: SfbmParams,
    pub vol: VolatilitySpec,
    pub horizon: f64,
    pub ns: Vec<usize>,
    pub m: usize,
    pub runs: usize,
    pub schemes: Vec<Scheme>,
    pub sampler: FeatureSampler,
    pub seed: u64,
}

/// Mean and sd of wall time per scheme and `N`, after one discarded warm-up run. All
/// runs in a cell share the Gaussian draws; the precomputed scheme reuses one feature set.
pub fn timing_benchmark(cfg: &TimingConfig) -> Result<Vec<TimingRow>> {
    if cfg.runs < 3 {
        return Err(Error::Config("timing needs at least 3 runs".into()));
    }
    let feature_seed = derive_seed(cfg.seed, 1, 0);
    let spectral = SpectralEvalConfig::default();
    let features = if cfg.schemes.contains(&Scheme::RffPrecomputed) {
        Some(cfg.sampler.sample(&cfg.params, cfg.m, spectral.clone(), feature_seed)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for (k, &n) in cfg.ns.iter().enumerate() {
        let grid = TimeGrid::uniform(n, cfg.horizon)?;
        let g = generate_gaussians(n, derive_seed(cfg.seed, 2, k as u64));
        for &scheme in &cfg.schemes {
            let run_once = || -> Result<f64> {
                let start = Instant::now();
                let path = match scheme {
                    Scheme::Euler => euler_simulate(&cfg.params, &cfg.vol, &grid, 0.0, &g)?,
                    Scheme::RffPrecomputed => rff_euler_simulate(features.as_ref().unwrap(), &cfg.vol, &grid, 0.0, &g)?,
                    Scheme::RffWithSampling => {
                        let fs = cfg.sampler.sample(&cfg.params, cfg.m, spectral.clone(), feature_seed)?;
                        rff_euler_simulate(&fs, &cfg.vol, &grid, 0.0, &g)?
                    }
                };
                std::hint::black_box(path.terminal());
                Ok(start.elapsed().as_secs_f64())
            };
            run_once()?;
            let times: Vec<f64> = (0..cfg.runs).map(|_| run_once()).collect::<Result<_>>()?;
            let mean = stats::mean(&times);
            let sd = stats::std_dev(&times);
            rows.push(TimingRow { scheme, n, m: cfg.m, runs: cfg.runs, mean_secs: mean, sd_secs: sd, noisy: sd > 0.5 * mean });
        }
    }
    Ok(rows)
}

/// Least squares of `ln err` on `ln x`.
pub fn mc_rate_fit(xs: &[f64], errors: &[f64]) -> Result<LinearFit> {
    if xs.len() != errors.len() {
        return Err(Error::DimensionMismatch { expected: xs.len(), got: errors.len() });
    }
    if xs.len() < 3 {
        return Err(Error::Config("rate fit needs at least three points".into()));
    }
    if xs.iter().chain(errors).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Domain("rate fit needs positive finite inputs".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|v| v.ln()).collect();
    stats::linear_fit(&lx, &ly)
}

/// `K_n(t) = Σ c_i e^{−x_i t}` with `c_i, x_i > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpSum {
    pub weights: Vec<f64>,
    pub rates: Vec<f64>,
}

impl Kernel for ExpSum {
    fn eval(&self, lag: f64) -> f64 {
        let t = lag.abs();
        self.weights.iter().zip(&self.rates).map(|(c, x)| c * (-x * t).exp()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpSumReport {
    pub fit: ExpSum,
    /// Least-squares residual norm on the fit grid.
    pub residual_rms: f64,
    /// Sup and L² errors on `[0, 2T]`.
    pub sup_error: f64,
    pub l2_error: f64,
    pub approximant_at_1p5t: f64,
    pub kernel_at_1p5t: f64,
}

fn exp_sum_cost(theta: &[f64], grid: &[f64], target: &[f64]) -> (Vec<f64>, f64) {
    let n = theta.len() / 2;
    let r: Vec<f64> = grid
        .iter()
        .zip(target)
        .map(|(&t, &k)| (0..n).map(|i| (theta[i] - theta[n + i].exp() * t).exp()).sum::<f64>() - k)
        .collect();
    let c = r.iter().map(|v| v * v).sum();
    (r, c)
}

fn levenberg_marquardt(theta0: Vec<f64>, grid: &[f64], target: &[f64]) -> (Vec<f64>, f64) {
    let n = theta0.len() / 2;
    let p = 2 * n;
    let mut theta = theta0;
    let (mut r, mut cost) = exp_sum_cost(&theta, grid, target);
    let mut mu = 1e-3;
    for _ in 0..2000 {
        let mut jac = DMatrix::<f64>::zeros(grid.len(), p);
        for (row, &t) in grid.iter().enumerate() {
            for i in 0..n {
                let x = theta[n + i].exp();
                let term = (theta[i] - x * t).exp();
                jac[(row, i)] = term;
                jac[(row, n + i)] = -term * x * t;
            }
        }
        let jt = jac.transpose();
        let a = &jt * &jac;
        let g = &jt * DVector::from_vec(r.clone());
        let mut improved = false;
        while mu < 1e16 {
            let mut damped = a.clone();
            for i in 0..p {
                damped[(i, i)] += mu * a[(i, i)].max(1e-12);
            }
            let Some(delta) = damped.cholesky().map(|c| c.solve(&(-&g))) else {
                mu *= 4.0;
                continue;
            };
            let trial: Vec<f64> = theta
                .iter()
                .zip(delta.iter())
                .enumerate()
                .map(|(i, (v, d))| if i < n { (v + d).clamp(-60.0, 30.0) } else { (v + d).clamp(-30.0, 30.0) })
                .collect();
            let (tr, tc) = exp_sum_cost(&trial, grid, target);
            if tc < cost {
                let rel = (cost - tc) / cost.max(f64::MIN_POSITIVE);
                theta = trial;
                r = tr;
                cost = tc;
                mu = (mu / 3.0).max(1e-12);
                improved = rel > 1e-15;
                break;
            }
            mu *= 4.0;
        }
        if !improved {
            break;
        }
    }
    (theta, cost)
}

/// Least-squares fit of `n_terms` positive exponentials to `kernel` on `fit_grid`,
/// in log-parameters, from four multistarts of geometrically spaced rates.
/// Errors are reported on `[0, 2·support]`.
pub fn exp_sum_fit<K: Kernel + ?Sized>(kernel: &K, n_terms: usize, fit_grid: &[f64], support: f64) -> Result<ExpSumReport> {
    if n_terms == 0 {
        return Err(Error::Config("need at least one exponential".into()));
    }
    if fit_grid.len() < 2 * n_terms {
        return Err(Error::Config("fit grid must have at least two points per term".into()));
    }
    let target: Vec<f64> = fit_grid.iter().map(|&t| kernel.eval(t)).collect();
    let t_max = fit_grid.iter().cloned().fold(0.0, f64::max);
    let t_min = fit_grid.iter().cloned().filter(|t| *t > 0.0).fold(f64::INFINITY, f64::min);
    if !(t_max > 0.0 && t_min.is_finite()) {
        return Err(Error::Config("fit grid needs positive points".into()));
    }
    let k0 = kernel.eval(0.0).abs().max(1e-300);
    let (lo, hi) = ((0.1 / t_max).ln(), (1.0 / t_min).ln());
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in 0..4 {
        let shift = (start as f64 - 1.5) * std::f64::consts::LN_2;
        let mut theta = vec![0.0; 2 * n_terms];
        for i in 0..n_terms {
            let frac = if n_terms == 1 { 0.5 } else { i as f64 / (n_terms - 1) as f64 };
            theta[i] = (k0 / n_terms as f64).ln();
            theta[n_terms + i] = lo + frac * (hi - lo) + shift;
        }
        let (theta, cost) = levenberg_marquardt(theta, fit_grid, &target);
        if best.as_ref().is_none_or(|b| cost < b.1) {
            best = Some((theta, cost));
        }
    }
    let (theta, cost) = best.unwrap();
    let fit = ExpSum {
        weights: theta[..n_terms].iter().map(|v| v.exp()).collect(),
        rates: theta[n_terms..].iter().map(|v| v.exp()).collect(),
    };
    let eval_n = 4001;
    let upper = 2.0 * support;
    let errs: Vec<f64> = (0..eval_n)
        .map(|i| {
            let t = upper * i as f64 / (eval_n - 1) as f64;
            (fit.eval(t) - kernel.eval(t)).abs()
        })
        .collect();
    let sup_error = errs.iter().cloned().fold(0.0, f64::max);
    let h = upper / (eval_n - 1) as f64;
    let l2 = (errs.windows(2).map(|w| 0.5 * h * (w[0] * w[0] + w[1] * w[1])).sum::<f64>()).sqrt();
    Ok(ExpSumReport {
        residual_rms: (cost / fit_grid.len() as f64).sqrt(),
        sup_error,
        l2_error: l2,
        approximant_at_1p5t: fit.eval(1.5 * support),
        kernel_at_1p5t: kernel.eval(1.5 * support),
        fit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpSumComparison {
    pub exp_sum: ExpSumReport,
    /// Features with the same number of parameters as the exponential sum (`2n`).
    pub rff_m: usize,
    pub rff_sup_error: f64,
}

/// Fits `n_terms` exponentials to the S-fBM kernel on `[0, 2T]` and reports the RFF
/// sup-error on the same interval with `2·n_terms` features.
pub fn exp_sum_vs_rff(params: &SfbmParams, n_terms: usize, sampler: &FeatureSampler, seed: u64) -> Result<ExpSumComparison> {
    let t = params.t;
    let grid: Vec<f64> = (0..=800).map(|i| 2.0 * t * i as f64 / 800.0).collect();
    let exp_sum = exp_sum_fit(params, n_terms, &grid, t)?;
    let rff_m = 2 * n_terms;
    let features = sampler.sample(params, rff_m, SpectralEvalConfig::default(), seed)?;
    let report = crate::rff::kernel_error_report(&features, params, &LagGrid::uniform(2.0 * t, 4001))?;
    Ok(ExpSumComparison { exp_sum, rff_m, rff_sup_error: report.sup_error })
}

/// Shortest round-trip decimal, switching to exponent form for very small or large magnitudes.
pub fn fmt_num(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// Rows of a table that can be written as CSV.
pub trait CsvRow {
    fn header() -> &'static str;
    fn row(&self) -> String;
}

impl CsvRow for WeakErrorRow {
    fn header() -> &'static str {
        "H,M,coupling,phi,weak_error,ci_low,ci_high,mean_phi_rff,mean_phi_euler"
    }
    fn row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.h,
            self.m,
            self.coupling.name(),
            self.phi.name(),
            fmt_num(self.weak_error),
            fmt_num(self.ci_low),
            fmt_num(self.ci_high),
            fmt_num(self.mean_phi_rff),
            fmt_num(self.mean_phi_euler)
        )
    }
}

impl CsvRow for StrongErrorRow {
    fn header() -> &'static str {
        "H,M,p,strong_error,ci_low,ci_high"
    }
    fn row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.h,
            self.m,
            self.p,
            fmt_num(self.strong_error),
            fmt_num(self.ci_low),
            fmt_num(self.ci_high)
        )
    }
}

impl CsvRow for TimingRow {
    fn header() -> &'static str {
        "scheme,N,M,runs,mean_secs,sd_secs,noisy"
    }
    fn row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.scheme.name(),
            self.n,
            self.m,
            self.runs,
            fmt_num(self.mean_secs),
            fmt_num(self.sd_secs),
            self.noisy
        )
    }
}

/// CSV text: `# ` comment lines, the column header, then one line per row.
pub fn to_csv<R: CsvRow>(rows: &[R], comments: &[String]) -> String {
    let mut out = String::new();
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
    let _ = writeln!(out, "{}", R::header());
    for r in rows {
        let _ = writeln!(out, "{}", r.row());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::ExponentialKernel;

    #[test]
    fn rate_fit_recovers_exact_slopes() {
        let xs = [100.0f64, 400.0, 1600.0, 6400.0];
        let half: Vec<f64> = xs.iter().map(|x| 3.0 / x.sqrt()).collect();
        assert!((mc_rate_fit(&xs, &half).unwrap().slope + 0.5).abs() < 1e-12);
        let flat = vec![0.2; 4];
        assert!(mc_rate_fit(&xs, &flat).unwrap().slope.abs() < 1e-12);
        let one: Vec<f64> = xs.iter().map(|x| 5.0 / x).collect();
        assert!((mc_rate_fit(&xs, &one).unwrap().slope + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rate_fit_rejects_degenerate_input() {
        assert!(mc_rate_fit(&[1.0, 2.0, 3.0], &[1.0, 0.0, 1.0]).is_err());
        assert!(mc_rate_fit(&[1.0, 2.0], &[1.0, 0.5]).is_err());
        assert!(mc_rate_fit(&[-1.0, 2.0, 3.0], &[1.0, 0.5, 0.2]).is_err());
    }

    #[test]
    fn single_exponential_is_fitted_exactly() {
        let k = ExponentialKernel { weight: 1.0, rate: 1.0 };
        let grid: Vec<f64> = (0..=200).map(|i| i as f64 * 0.05).collect();
        let rep = exp_sum_fit(&k, 1, &grid, 5.0).unwrap();
        assert!((rep.fit.weights[0] - 1.0).abs() < 1e-6 && (rep.fit.rates[0] - 1.0).abs() < 1e-6);
        assert!(rep.sup_error <= 1e-6);
    }

    #[test]
    fn exponential_sums_cannot_vanish_beyond_the_support() {
        let params = SfbmParams::from_nu2(0.1, 50.0, 100.0, 1).unwrap();
        let grid: Vec<f64> = (0..=400).map(|i| i as f64 * 0.5).collect();
        let rep = exp_sum_fit(&params, 4, &grid, 100.0).unwrap();
        assert_eq!(rep.kernel_at_1p5t, 0.0);
        assert!(rep.approximant_at_1p5t > 0.0);
        assert!(rep.sup_error >= rep.approximant_at_1p5t);
        assert!(rep.fit.weights.iter().chain(&rep.fit.rates).all(|v| *v > 0.0));
    }

    #[test]
    fn identical_processes_have_zero_error() {
        let x = [0.1, -0.3, 2.0];
        assert_eq!(weak_error(&x, &x, TestFunction::Square), 0.0);
        assert_eq!(strong_error(&x, &x, 2.0), 0.0);
    }

    #[test]
    fn small_experiment_is_deterministic_and_consistent() {
        let mut cfg = ExperimentConfig::reference_preset(0.1, 5).unwrap();
        cfg.n_steps = 50;
        cfg.n_paths = 20;
        cfg.ms = vec![50, 200];
        cfg.bootstrap_resamples = 100;
        cfg.sampler = FeatureSampler::InverseCdf;
        let a = run_error_experiment(&cfg).unwrap();
        let b = run_error_experiment(&cfg).unwrap();
        assert_eq!(to_csv(&a.weak, &[]), to_csv(&b.weak, &[]));
        assert_eq!(a.weak.len(), 2 * 2 * 2);
        assert_eq!(a.strong.len(), 2 * 3);
        assert!(a.weak.iter().all(|r| r.weak_error >= 0.0 && r.ci_low <= r.ci_high));
        for w in a.weak.iter().filter(|r| r.coupling == Coupling::Common && r.phi == TestFunction::Square) {
            let s = a.strong.iter().find(|s| s.m == w.m && s.p == 2.0).unwrap().strong_error;
            let bound = 3.0 * (s * (s + 4.0 * a.reference_second_moment)).sqrt();
            assert!(w.weak_error <= bound);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = ExperimentConfig::reference_preset(0.1, 0).unwrap();
        cfg.ms = vec![100, 50];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::reference_preset(0.1, 0).unwrap();
        cfg.n_paths = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn timing_needs_three_runs() {
        let cfg = TimingConfig {
            params: SfbmParams::from_nu2(0.1, 1.0, 200.0, 1).unwrap(),
            vol: VolatilitySpec::affine(0.3, 0.1),
            horizon: 1.0,
            ns: vec![10],
            m: 8,
            runs: 2,
            schemes: vec![Scheme::Euler],
            sampler: FeatureSampler::InverseCdf,
            seed: 0,
        };
        assert!(timing_benchmark(&cfg).is_err());
        let cfg = TimingConfig { runs: 3, schemes: vec![Scheme::Euler, Scheme::RffPrecomputed], ..cfg };
        let rows = timing_benchmark(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.mean_secs >= 0.0));
    }
}
