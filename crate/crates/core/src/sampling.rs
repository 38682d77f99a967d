//! Drawing RFF frequencies from the S-fBM spectral density.
//!
//! Frequencies are `η = x/T` with `x` distributed as `φ(‖x‖)` on R^d. Two samplers:
//!
//! * HMC on `log φ`, by default in asinh-radial coordinates `x = sinh(‖y‖) y/‖y‖`,
//!   which turn the polynomial tail `‖x‖^{−d−2H}` into an exponential one in `y`.
//! * An inverse-CDF sampler built from a quadrature table of the radial mass, with
//!   the exact power-law tail beyond the table.

use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmc::{hmc_sample, HmcChain, HmcConfig, LogDensity};
use crate::kernel::{is_positive_definite, SfbmParams};
use crate::quadrature::GaussLegendre;
use crate::rff::FeatureSet;
use crate::spectral::{
    cumulative_radial_mass, radial_mass_between, radial_tail_mass, sphere_area, SfbmSpectrum, SpectralEvalConfig,
    RADIAL_MASS_CUTOFF,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    /// `y ∈ R^d` with `x = sinh(‖y‖) y/‖y‖`; unit mass matrix.
    AsinhRadial,
    /// `η` itself with mass matrix `1/T²`; the step size is divided by `T²`.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcSettings {
    pub epsilon: f64,
    pub leapfrog_steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub tune: bool,
    pub parameterization: Parameterization,
}

impl Default for HmcSettings {
    fn default() -> Self {
        HmcSettings {
            epsilon: 0.25,
            leapfrog_steps: 12,
            burn_in: 2000,
            thin: 5,
            tune: true,
            parameterization: Parameterization::AsinhRadial,
        }
    }
}

/// `log φ` of the S-fBM profile in the chosen coordinates.
pub struct SfbmTarget {
    spec: SfbmSpectrum,
    t: f64,
    parameterization: Parameterization,
}

impl SfbmTarget {
    pub fn new(params: &SfbmParams, cfg: SpectralEvalConfig, parameterization: Parameterization) -> Result<Self> {
        params.validate()?;
        cfg.validate()?;
        if !is_positive_definite(params) {
            return Err(Error::Domain(format!(
                "S-fBM kernel is not positive definite for d={}, H={}",
                params.d, params.h
            )));
        }
        Ok(SfbmTarget { spec: SfbmSpectrum::for_params(params, cfg), t: params.t, parameterization })
    }

    /// Maps a chain state to the frequency vector `η`.
    pub fn to_frequency(&self, state: &[f64]) -> Vec<f64> {
        match self.parameterization {
            Parameterization::Direct => state.to_vec(),
            Parameterization::AsinhRadial => {
                let s = norm(state);
                if s == 0.0 {
                    return vec![0.0; state.len()];
                }
                let scale = s.sinh() / (s * self.t);
                state.iter().map(|v| v * scale).collect()
            }
        }
    }

    /// `(ln φ, x·d ln φ/dx)` evaluated from `ln x`, safe for arguments beyond f64 range.
    fn log_profile_and_elasticity(&self, x: f64, ln_x: f64) -> (f64, f64) {
        let d = self.spec.dimension() as f64;
        let tail_exp = d + 2.0 * self.spec.hurst();
        if ln_x > 27.0 {
            return (self.spec.tail_coefficient().ln() - tail_exp * ln_x, -tail_exp);
        }
        let (lp, slope) = self.spec.log_profile_and_slope(x);
        (lp, slope * x * x)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

impl LogDensity for SfbmTarget {
    fn dim(&self) -> usize {
        self.spec.dimension()
    }

    fn log_density_and_grad(&self, state: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.spec.dimension();
        match self.parameterization {
            Parameterization::Direct => {
                let r = norm(state) * self.t;
                let (lp, slope) = self.spec.log_profile_and_slope(r);
                let t2 = self.t * self.t;
                for (g, v) in grad.iter_mut().zip(state) {
                    *g = t2 * slope * v;
                }
                lp
            }
            Parameterization::AsinhRadial => {
                let s = norm(state);
                let dm1 = (d - 1) as f64;
                // g(s) = (d/ds log p)/s, so that ∇_y log p = g(s)·y.
                let (lp, g) = if s < 1.0 {
                    let x = s.sinh();
                    let (lp_phi, slope) = self.spec.log_profile_and_slope(x);
                    let s2 = s * s;
                    let (sinhc, tanhc, cothc) = if s < 1e-4 {
                        (1.0 + s2 / 6.0, 1.0 - s2 / 3.0, 1.0 / 3.0 - s2 / 45.0)
                    } else {
                        (x / s, s.tanh() / s, (1.0 / s.tanh() - 1.0 / s) / s)
                    };
                    let lp = lp_phi + s.cosh().ln() + dm1 * sinhc.ln();
                    (lp, slope * sinhc * s.cosh() + tanhc + dm1 * cothc)
                } else {
                    let e2 = (-2.0 * s).exp();
                    let ln_sinh = s - LN_2 + (-e2).ln_1p();
                    let ln_cosh = s - LN_2 + e2.ln_1p();
                    let x = if ln_sinh < 700.0 { s.sinh() } else { f64::INFINITY };
                    let (lp_phi, elast) = self.log_profile_and_elasticity(x, ln_sinh);
                    let coth = (1.0 + e2) / (1.0 - e2);
                    let tanh = 1.0 / coth;
                    let lp = lp_phi + ln_cosh + dm1 * (ln_sinh - s.ln());
                    (lp, (elast * coth + tanh + dm1 * (coth - 1.0 / s)) / s)
                };
                for (gi, v) in grad.iter_mut().zip(state) {
                    *gi = g * v;
                }
                lp
            }
        }
    }
}

/// Draws `m` feature frequencies by HMC, started at the origin.
pub fn sample_features_hmc(
    params: &SfbmParams,
    m: usize,
    settings: &HmcSettings,
    spectral: SpectralEvalConfig,
    seed: u64,
) -> Result<(FeatureSet, HmcChain)> {
    if m == 0 {
        return Err(Error::Config("number of features must be at least 1".into()));
    }
    let target = SfbmTarget::new(params, spectral, settings.parameterization)?;
    let d = params.d;
    let (epsilon, mass) = match settings.parameterization {
        Parameterization::AsinhRadial => (settings.epsilon, 1.0),
        Parameterization::Direct => {
            let t2 = params.t * params.t;
            (settings.epsilon / t2, 1.0 / t2)
        }
    };
    let cfg = HmcConfig {
        epsilon,
        leapfrog_steps: settings.leapfrog_steps,
        mass_diag: vec![mass; d],
        n_samples: m,
        burn_in: settings.burn_in,
        thin: settings.thin,
        seed,
        init: vec![0.0; d],
        tune: settings.tune,
    };
    let chain = hmc_sample(&target, &cfg)?;
    let mut freqs = Vec::with_capacity(m * d);
    for s in &chain.samples {
        freqs.extend(target.to_frequency(s));
    }
    Ok((FeatureSet::for_sfbm(params, freqs, seed)?, chain))
}

/// How feature frequencies are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum FeatureSampler {
    Hmc(HmcSettings),
    InverseCdf,
}

impl Default for FeatureSampler {
    fn default() -> Self {
        FeatureSampler::Hmc(HmcSettings::default())
    }
}

impl FeatureSampler {
    pub fn sample(&self, params: &SfbmParams, m: usize, spectral: SpectralEvalConfig, seed: u64) -> Result<FeatureSet> {
        match self {
            FeatureSampler::Hmc(settings) => Ok(sample_features_hmc(params, m, settings, spectral, seed)?.0),
            FeatureSampler::InverseCdf => sample_features_inverse_cdf(params, m, spectral, seed),
        }
    }
}

/// Tabulated CDF of the radial variable `x = ‖ηT‖`, with density proportional to
/// `x^{d−1} φ(x)`, and an exact power-law tail beyond the table.
#[derive(Debug, Clone)]
pub struct RadialInverseCdf {
    d: usize,
    h: f64,
    edges: Vec<f64>,
    cdf: Vec<f64>,
    pdf: Vec<f64>,
    body_fraction: f64,
}

/// Largest `ln x` returned by the tail inversion.
const MAX_LN_RADIUS: f64 = 690.0;

impl RadialInverseCdf {
    pub fn new(spec: &SfbmSpectrum) -> Self {
        let d = spec.dimension();
        let theta = spec.config().series_switch_threshold;
        let x1 = RADIAL_MASS_CUTOFF;
        let mut edges = Vec::new();
        let fine = 0.125;
        let n_fine = (theta / fine).round() as usize;
        edges.extend((0..=n_fine).map(|i| i as f64 * fine));
        let coarse = if d == 1 { 0.5 } else { 0.25 * std::f64::consts::PI };
        let n_coarse = ((x1 - theta) / coarse).ceil() as usize;
        let step = (x1 - theta) / n_coarse as f64;
        edges.extend((1..=n_coarse).map(|i| theta + i as f64 * step));

        let omega = sphere_area(d);
        let radial_pdf = |x: f64| omega * x.powi(d as i32 - 1) * spec.profile(x);
        let pdf: Vec<f64> = edges.par_iter().map(|&x| radial_pdf(x)).collect();
        let rule = GaussLegendre::sixteen();
        let mut cdf = vec![0.0; edges.len()];
        if d == 1 {
            let masses: Vec<f64> =
                edges.par_windows(2).map(|w| rule.integrate(w[0], w[1], radial_pdf)).collect();
            for (i, mass) in masses.iter().enumerate() {
                cdf[i + 1] = cdf[i] + mass;
            }
        } else {
            let masses: Vec<f64> = edges[..=n_fine]
                .par_windows(2)
                .map(|w| rule.integrate(w[0], w[1], radial_pdf))
                .collect();
            for (i, mass) in masses.iter().enumerate() {
                cdf[i + 1] = cdf[i] + mass;
            }
            let base = cdf[n_fine] - radial_mass_between(spec, 0.0, theta);
            let far: Vec<f64> =
                edges[n_fine + 1..].par_iter().map(|&x| cumulative_radial_mass(spec, x)).collect();
            for (i, c) in far.into_iter().enumerate() {
                cdf[n_fine + 1 + i] = c + base;
            }
        }
        let body = *cdf.last().unwrap();
        let total = body + radial_tail_mass(spec, x1);
        for c in cdf.iter_mut() {
            *c /= total;
        }
        let pdf = pdf.into_iter().map(|p| p / total).collect();
        RadialInverseCdf { d, h: spec.hurst(), edges, cdf, pdf, body_fraction: body / total }
    }

    pub fn dimension(&self) -> usize {
        self.d
    }

    /// Probability that the radius lies inside the table.
    pub fn body_fraction(&self) -> f64 {
        self.body_fraction
    }

    /// Radius with CDF value `u ∈ [0, 1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        let x1 = *self.edges.last().unwrap();
        if u >= self.body_fraction {
            let tail_u = ((1.0 - u) / (1.0 - self.body_fraction)).clamp(0.0, 1.0);
            let ln_x = (x1.ln() - tail_u.ln() / (2.0 * self.h)).min(MAX_LN_RADIUS);
            return ln_x.exp();
        }
        let i = match self.cdf.partition_point(|&c| c <= u) {
            0 => 0,
            k => (k - 1).min(self.edges.len() - 2),
        };
        let (a, b) = (self.edges[i], self.edges[i + 1]);
        let w = b - a;
        let (f0, f1) = (self.cdf[i], self.cdf[i + 1]);
        let (m0, m1) = (self.pdf[i] * w, self.pdf[i + 1] * w);
        let hermite = |t: f64| {
            let t2 = t * t;
            let t3 = t2 * t;
            (2.0 * t3 - 3.0 * t2 + 1.0) * f0 + (t3 - 2.0 * t2 + t) * m0 + (-2.0 * t3 + 3.0 * t2) * f1 + (t3 - t2) * m1
        };
        let dhermite = |t: f64| {
            let t2 = t * t;
            (6.0 * t2 - 6.0 * t) * (f0 - f1) + (3.0 * t2 - 4.0 * t + 1.0) * m0 + (3.0 * t2 - 2.0 * t) * m1
        };
        // Safeguarded Newton on [0, 1].
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut t = if f1 > f0 { ((u - f0) / (f1 - f0)).clamp(0.0, 1.0) } else { 0.5 };
        for _ in 0..60 {
            let r = hermite(t) - u;
            if r.abs() <= 1e-15 {
                break;
            }
            if r > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let dr = dhermite(t);
            let newton = t - r / dr;
            t = if dr > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if hi - lo < 1e-15 {
                break;
            }
        }
        a + t * w
    }

    /// Tabulated CDF of the radius at `x` (inside the table, or the tail model beyond).
    pub fn cdf(&self, x: f64) -> f64 {
        let x1 = *self.edges.last().unwrap();
        if x >= x1 {
            return 1.0 - (1.0 - self.body_fraction) * (x / x1).powf(-2.0 * self.h);
        }
        let i = self.edges.partition_point(|&e| e <= x).saturating_sub(1).min(self.edges.len() - 2);
        let (a, b) = (self.edges[i], self.edges[i + 1]);
        let w = b - a;
        let t = (x - a) / w;
        let t2 = t * t;
        let t3 = t2 * t;
        (2.0 * t3 - 3.0 * t2 + 1.0) * self.cdf[i]
            + (t3 - 2.0 * t2 + t) * self.pdf[i] * w
            + (-2.0 * t3 + 3.0 * t2) * self.cdf[i + 1]
            + (t3 - t2) * self.pdf[i + 1] * w
    }

    /// One frequency vector `η` (radius over `T`, uniform direction).
    pub fn sample<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let r = self.quantile(u) / t;
        if self.d == 1 {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            return vec![sign * r];
        }
        loop {
            let dir: Vec<f64> = (0..self.d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = norm(&dir);
            if n > 0.0 {
                return dir.into_iter().map(|v| r * v / n).collect();
            }
        }
    }
}

/// Draws `m` independent frequencies from a prebuilt table.
pub fn sample_features_from_table(
    params: &SfbmParams,
    table: &RadialInverseCdf,
    m: usize,
    seed: u64,
) -> Result<FeatureSet> {
    if table.dimension() != params.d {
        return Err(Error::DimensionMismatch { expected: params.d, got: table.dimension() });
    }
    if m == 0 {
        return Err(Error::Config("number of features must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut freqs = Vec::with_capacity(m * params.d);
    for _ in 0..m {
        freqs.extend(table.sample(params.t, &mut rng));
    }
    FeatureSet::for_sfbm(params, freqs, seed)
}

/// Draws `m` independent frequencies by inverse-CDF sampling.
pub fn sample_features_inverse_cdf(
    params: &SfbmParams,
    m: usize,
    spectral: SpectralEvalConfig,
    seed: u64,
) -> Result<FeatureSet> {
    params.validate()?;
    if !is_positive_definite(params) {
        return Err(Error::Domain(format!("S-fBM kernel is not positive definite for d={}, H={}", params.d, params.h)));
    }
    let table = RadialInverseCdf::new(&SfbmSpectrum::for_params(params, spectral));
    sample_features_from_table(params, &table, m, seed)
}
