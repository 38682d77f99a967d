//! Spectral density of the S-fBM kernel.
//!
//! Under the convention `f(ω) = (2π)^{−d} ∫ C(‖u‖) e^{−iωᵀu} du` the density is radial,
//! `f(r) = ν² T^d φ_{d,H}(rT)`, with the dimensionless profile
//!
//! ```text
//! φ(x) = c_{d,H} · ₁F₂(d/2+H; d/2+H+1, d/2+1; −x²/4),
//! c_{d,H} = (1/2) / (2^d π^{d/2} (d/(2H)+1) Γ(d/2+1)),
//! ```
//!
//! equivalently `φ(x) = (2π)^{−d/2} (1/2) x^{1−d/2} ∫₀¹ (1−v^{2H}) v^{d/2} J_{d/2−1}(xv) dv`.
//!
//! [`SfbmSpectrum`] evaluates φ with three branches: the ₁F₂ series in double-double
//! arithmetic for `x ≤ θ`; beyond θ, for d = 1 the exact large-x expansion
//! `φ(x) = (2π)^{−1} [Γ(1+2H) sin(πH) x^{−1−2H} + Re(−e^{ix} Σ_{k≥1} (−1)^k (2H)_{k↓} (ix)^{−k−1})]`
//! and for d ≥ 2 panel Gauss–Legendre quadrature of the radial integral (each panel at
//! most half an oscillation) up to `x = 2000`, then the leading power law plus the
//! first endpoint correction.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{is_positive_definite, sfbm_kernel_eval, SfbmParams};
use crate::quadrature::{simpson, GaussLegendre};
use crate::specfun::{
    bessel_j, hyp1f2_term_ratio, log_gamma_unchecked, CompensatedSum, Dd, SeriesTruncation, EULER_GAMMA,
};

/// Profile argument beyond which the d ≥ 2 quadrature gives way to the asymptotic form.
pub const FAR_FIELD_START: f64 = 2000.0;

/// Hard cap on series orders.
pub const MAX_TRUNCATION_ORDER: usize = 5000;

/// Relative size of the double-double unit roundoff.
const DD_EPS: f64 = 4.93e-32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralEvalConfig {
    /// Cutoff θ on `rT` separating the series from the large-argument branch.
    pub series_switch_threshold: f64,
    /// Fixed series order; `None` sums until the tail is below double-double resolution.
    pub truncation: Option<SeriesTruncation>,
    /// Clamp applied before taking logarithms.
    pub density_floor: f64,
}

impl Default for SpectralEvalConfig {
    fn default() -> Self {
        SpectralEvalConfig { series_switch_threshold: 40.0, truncation: None, density_floor: 1e-300 }
    }
}

impl SpectralEvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.series_switch_threshold > 0.0) {
            return Err(Error::Config("series_switch_threshold must be positive".into()));
        }
        if !(self.density_floor > 0.0 && self.density_floor <= 1e-100) {
            return Err(Error::Config("density_floor must lie in (0, 1e-100]".into()));
        }
        Ok(())
    }
}

/// Dimensionless spectral profile φ_{d,H} with its precomputed constants.
#[derive(Debug, Clone)]
pub struct SfbmSpectrum {
    d: usize,
    h: f64,
    a: f64,
    b1: f64,
    b2: f64,
    prefactor: f64,
    tail_coef: f64,
    cfg: SpectralEvalConfig,
}

impl SfbmSpectrum {
    pub fn new(d: usize, h: f64, cfg: SpectralEvalConfig) -> Self {
        let half_d = 0.5 * d as f64;
        SfbmSpectrum {
            d,
            h,
            a: half_d + h,
            b1: half_d + h + 1.0,
            b2: half_d + 1.0,
            prefactor: density_prefactor(d, h),
            tail_coef: tail_coefficient(d, h),
            cfg,
        }
    }

    pub fn for_params(params: &SfbmParams, cfg: SpectralEvalConfig) -> Self {
        Self::new(params.d, params.h, cfg)
    }

    pub fn dimension(&self) -> usize {
        self.d
    }

    pub fn hurst(&self) -> f64 {
        self.h
    }

    pub fn config(&self) -> &SpectralEvalConfig {
        &self.cfg
    }

    /// `c_{d,H}`, the value φ(0).
    pub fn prefactor(&self) -> f64 {
        self.prefactor
    }

    /// Coefficient `A` of the non-oscillatory tail `φ(x) ~ A x^{−d−2H}`.
    pub fn tail_coefficient(&self) -> f64 {
        self.tail_coef
    }

    /// φ(x) for `x ≥ 0`.
    pub fn profile(&self, x: f64) -> f64 {
        let x = x.abs();
        if x <= self.cfg.series_switch_threshold {
            self.profile_series(x, self.cfg.truncation)
        } else if self.d == 1 {
            far_field_d1(self.h, x).0
        } else if x <= FAR_FIELD_START {
            self.profile_quadrature(x)
        } else {
            self.profile_far_asymptotic(x)
        }
    }

    /// φ(x) from the ₁F₂ series (double-double above x = 4).
    pub fn profile_series(&self, x: f64, trunc: Option<SeriesTruncation>) -> f64 {
        self.prefactor * hyp_series(self.a, self.b1, self.b2, x, trunc)
    }

    /// φ(x) by Gauss–Legendre quadrature of the radial Fourier integral.
    pub fn profile_quadrature(&self, x: f64) -> f64 {
        let nu = 0.5 * self.d as f64 - 1.0;
        let half_d = 0.5 * self.d as f64;
        let two_h = 2.0 * self.h;
        if x == 0.0 {
            return self.prefactor;
        }
        let integral = graded_oscillatory_integral(x, |v| {
            (1.0 - v.powf(two_h)) * v.powf(half_d) * bessel_j(nu, x * v)
        });
        (2.0 * PI).powf(-half_d) * 0.5 * x.powf(1.0 - half_d) * integral
    }

    /// Leading power law plus the first endpoint correction (d ≥ 2, large x).
    pub fn profile_far_asymptotic(&self, x: f64) -> f64 {
        let half_d = 0.5 * self.d as f64;
        let lead = self.tail_coef * x.powf(-(self.d as f64) - 2.0 * self.h);
        if x > 1e12 {
            return lead;
        }
        let boundary = (2.0 * PI).powf(-half_d) * self.h * x.powf(-1.0 - half_d) * bessel_j(half_d + 1.0, x);
        lead + boundary
    }

    /// `(ln φ(x), (d ln φ/dx)/x)`. The second entry stays finite at `x = 0`.
    pub fn log_profile_and_slope(&self, x: f64) -> (f64, f64) {
        let x = x.abs();
        let floor = self.cfg.density_floor;
        if x <= self.cfg.series_switch_threshold {
            let f = hyp_series(self.a, self.b1, self.b2, x, self.cfg.truncation);
            let f1 = hyp_series(self.a + 1.0, self.b1 + 1.0, self.b2 + 1.0, x, self.cfg.truncation);
            let phi = self.prefactor * f;
            if !(phi > floor) {
                return (floor.ln(), 0.0);
            }
            // d/dx F(−x²/4) = −(x/2) (a/(b1 b2)) F₁
            let slope = -0.5 * self.a / (self.b1 * self.b2) * f1 / f;
            return (phi.ln(), slope);
        }
        let d = self.d as f64;
        if x > 1e12 {
            let lead_ln = self.tail_coef.ln() - (d + 2.0 * self.h) * x.ln();
            return (lead_ln, -(d + 2.0 * self.h) / (x * x));
        }
        if self.d == 1 {
            let (phi, dphi) = far_field_d1(self.h, x);
            if !(phi > floor) {
                return (floor.ln(), 0.0);
            }
            return (phi.ln(), dphi / (phi * x));
        }
        let phi = self.profile(x);
        if !(phi > floor) {
            return (floor.ln(), 0.0);
        }
        let step = 1e-5 * (1.0 + x);
        let up = self.profile(x + step).max(floor);
        let down = self.profile(x - step).max(floor);
        let dlog = (up.ln() - down.ln()) / (2.0 * step);
        (phi.ln(), dlog / x)
    }
}

/// φ(0) = (1/2) / (2^d π^{d/2} (d/(2H)+1) Γ(d/2+1)).
pub fn density_prefactor(d: usize, h: f64) -> f64 {
    let df = d as f64;
    0.5 / (2f64.powf(df) * PI.powf(0.5 * df) * (df / (2.0 * h) + 1.0) * log_gamma_unchecked(0.5 * df + 1.0).exp())
}

/// `A_{d,H} = (H/2) π^{−d/2} 2^{2H} Γ(H+d/2)/Γ(1−H)`, the coefficient of the
/// non-oscillatory tail `φ(x) ~ A x^{−d−2H}`.
pub fn tail_coefficient(d: usize, h: f64) -> f64 {
    let df = d as f64;
    0.5 * h * PI.powf(-0.5 * df) * 2f64.powf(2.0 * h) * (log_gamma_unchecked(h + 0.5 * df) - log_gamma_unchecked(1.0 - h)).exp()
}

/// ₁F₂(a; b1, b2; −x²/4), summed to `trunc` or automatically to full precision.
fn hyp_series(a: f64, b1: f64, b2: f64, x: f64, trunc: Option<SeriesTruncation>) -> f64 {
    let max_order = trunc.map_or(MAX_TRUNCATION_ORDER, |t| t.order);
    let auto = trunc.is_none();
    let z_abs = 0.25 * x * x;
    if x <= 4.0 {
        let mut term = 1.0;
        let mut acc = CompensatedSum::new();
        acc.add(term);
        for k in 0..max_order {
            let kf = k as f64;
            term *= -(a + kf) * z_abs / ((b1 + kf) * (b2 + kf) * (kf + 1.0));
            acc.add(term);
            if auto && term.abs() <= 1e-18 * acc.value().abs() && hyp1f2_term_ratio(a, b1, b2, z_abs, k + 1) < 1.0 {
                break;
            }
        }
        return acc.value();
    }
    let z = -Dd::square_f64(x).mul_f64(0.25);
    let mut term = Dd::ONE;
    let mut acc = Dd::ONE;
    for k in 0..max_order {
        let kf = k as f64;
        let num = Dd::new(a).add_f64(kf) * z;
        let den = (Dd::new(b1).add_f64(kf) * Dd::new(b2).add_f64(kf)).mul_f64(kf + 1.0);
        term = term * num / den;
        acc = acc + term;
        if auto
            && term.hi.abs() <= 1e-20 * acc.hi.abs()
            && hyp1f2_term_ratio(a, b1, b2, z_abs, k + 1) < 1.0
        {
            break;
        }
    }
    acc.to_f64()
}

/// Exact large-x expansion of the d = 1 profile and its derivative.
fn far_field_d1(h: f64, x: f64) -> (f64, f64) {
    let b = 2.0 * h;
    let lead = (log_gamma_unchecked(1.0 + b)).exp() * (PI * h).sin();
    let power = x.powf(-1.0 - b);
    let smooth = lead * power;
    let dsmooth = -(1.0 + b) * lead * power / x;
    // S = Σ_{k≥1} c_k (−i)^{k+1} x^{−k−1},  c_k = (−1)^k (b)_{k↓}
    const NEG_I_POW: [(f64, f64); 4] = [(1.0, 0.0), (0.0, -1.0), (-1.0, 0.0), (0.0, 1.0)];
    let (mut s_re, mut s_im, mut ds_re, mut ds_im) = (0.0, 0.0, 0.0, 0.0);
    let mut c = 1.0;
    let mut xp = 1.0 / x;
    let mut prev = f64::INFINITY;
    for k in 1..400usize {
        c *= -(b - (k - 1) as f64);
        xp /= x;
        let mag = c * xp;
        if mag.abs() > prev && k as f64 > x {
            break;
        }
        prev = mag.abs();
        let (pr, pi) = NEG_I_POW[(k + 1) % 4];
        s_re += mag * pr;
        s_im += mag * pi;
        let dmag = -((k + 1) as f64) * mag / x;
        ds_re += dmag * pr;
        ds_im += dmag * pi;
        if mag.abs() < 1e-18 * smooth.abs() {
            break;
        }
    }
    let (sx, cx) = x.sin_cos();
    // Re(−e^{ix} S) and its derivative Re(−e^{ix}(iS + S'))
    let osc = -(cx * s_re - sx * s_im);
    let t_re = -s_im + ds_re;
    let t_im = s_re + ds_im;
    let dosc = -(cx * t_re - sx * t_im);
    let inv = 1.0 / (2.0 * PI);
    ((smooth + osc) * inv, (dsmooth + dosc) * inv)
}

/// ∫₀¹ g(v) dv for integrands oscillating at frequency `x`: panels of at most half a
/// period, geometrically graded toward v = 0, 16-point Gauss–Legendre on each.
fn graded_oscillatory_integral<F: FnMut(f64) -> f64>(x: f64, mut g: F) -> f64 {
    let rule = GaussLegendre::sixteen();
    let w_osc = if x > 0.0 { PI / x } else { 1.0 };
    let mut acc = CompensatedSum::new();
    let mut hi = 1.0;
    while hi > 1e-15 {
        let w = w_osc.min(0.5 * hi);
        let lo = hi - w;
        acc.add(rule.integrate(lo, hi, &mut g));
        hi = lo;
    }
    acc.value()
}

/// `f(r)` for the given parameters.
pub fn spectral_density(params: &SfbmParams, r: f64, cfg: &SpectralEvalConfig) -> f64 {
    let spec = SfbmSpectrum::for_params(params, *cfg);
    params.nu2() * params.t.powi(params.d as i32) * spec.profile(r * params.t)
}

/// The d = 1 series form
/// `g(u) = √(2/π) ν² [sin(uT)/u − T Σ_{k even ≤ 2N} (−1)^{k/2} (Tu)^k / ((2H+k+1) k!)]`,
/// which equals `2√(2π) f(|u|)`. The sum is carried in double-double arithmetic.
pub fn spectral_density_series_d1(params: &SfbmParams, u: f64, trunc: SeriesTruncation) -> Result<f64> {
    if params.d != 1 {
        return Err(Error::Domain(format!("series form requires d = 1, got d = {}", params.d)));
    }
    let t = params.t;
    let x = u * t;
    let sinc = if u.abs() < 1e-12 { t } else { (u * t).sin() / u };
    let q = -Dd::square_f64(x);
    let mut p = Dd::ONE;
    let mut acc = Dd::new(1.0 / (2.0 * params.h + 1.0));
    for j in 0..trunc.order {
        let k = 2 * j;
        p = p * q / Dd::new((k + 1) as f64).mul_f64((k + 2) as f64);
        // Each denominator is formed exactly so that rounding does not vary from term to term.
        acc = acc + p / Dd::new(2.0 * params.h).add_f64((k + 3) as f64);
    }
    let bracket = sinc - t * acc.to_f64();
    Ok((2.0 / PI).sqrt() * params.nu2() * bracket)
}

/// The even-d Bessel form
/// `g(r) = ν² T^d [J_{d/2}(Tr)/(Tr)^{d/2} − 2^{1−d/2} Σ_{m≤N} (−1)^m (Tr/2)^{2m} / (m! Γ(m+d/2) (2H+d+2m))]`,
/// which equals `2(2π)^{d/2} f(r)`.
pub fn spectral_density_bessel_even_d(params: &SfbmParams, r: f64, trunc: SeriesTruncation) -> Result<f64> {
    let d = params.d;
    if d % 2 != 0 {
        return Err(Error::Domain(format!("Bessel form requires even d, got d = {d}")));
    }
    let half_d = 0.5 * d as f64;
    let x = (r * params.t).abs();
    let bessel_part = if x < 1e-8 {
        (-(half_d * 2f64.ln()) - log_gamma_unchecked(half_d + 1.0)).exp()
    } else {
        bessel_j(half_d, x) / x.powf(half_d)
    };
    let q = -Dd::square_f64(0.5 * x);
    let mut p = Dd::new((-log_gamma_unchecked(half_d)).exp());
    let denom0 = 2.0 * params.h + d as f64;
    let mut acc = p / Dd::new(denom0);
    for m in 0..trunc.order {
        let m1 = (m + 1) as f64;
        p = p * q / Dd::new(m1).mul_f64(m as f64 + half_d);
        acc = acc + p / Dd::new(denom0).add_f64(2.0 * m1);
    }
    let series = 2f64.powf(1.0 - half_d) * acc.to_f64();
    Ok(params.nu2() * params.t.powi(d as i32) * (bessel_part - series))
}

/// Series order chosen from the alternating-series tail bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationReport {
    pub truncation: SeriesTruncation,
    /// Set when the bound cannot be met within [`MAX_TRUNCATION_ORDER`] terms or when
    /// the peak term times the double-double roundoff already exceeds the tolerance.
    pub overflow: bool,
    /// Natural log of the largest ₁F₂ term magnitude.
    pub ln_peak_term: f64,
}

impl TruncationReport {
    pub fn peak_term(&self) -> f64 {
        self.ln_peak_term.exp()
    }
}

/// Smallest N with `|term_{N+1}| ≤ tol` once the ₁F₂ terms at `z = −(radius·T)²/4` decrease.
pub fn truncation_order(params: &SfbmParams, radius: f64, tol: f64) -> Result<TruncationReport> {
    if !(tol > 0.0) || !(radius > 0.0) {
        return Err(Error::Domain("truncation_order requires tol > 0 and radius > 0".into()));
    }
    let half_d = 0.5 * params.d as f64;
    let (a, b1, b2) = (half_d + params.h, half_d + params.h + 1.0, half_d + 1.0);
    let x = radius * params.t;
    let z_abs = 0.25 * x * x;
    let ln_tol = tol.ln();
    let mut ln_term = 0.0f64;
    let mut ln_peak = 0.0f64;
    let mut found = None;
    for k in 0..MAX_TRUNCATION_ORDER {
        let ratio = hyp1f2_term_ratio(a, b1, b2, z_abs, k);
        ln_term += ratio.ln();
        ln_peak = ln_peak.max(ln_term);
        // ln_term is now ln|term_{k+1}|
        if ratio < 1.0 && ln_term <= ln_tol {
            found = Some(k);
            break;
        }
    }
    let (order, mut overflow) = match found {
        Some(n) => (n, false),
        None => (MAX_TRUNCATION_ORDER, true),
    };
    if ln_peak + DD_EPS.ln() > ln_tol {
        overflow = true;
    }
    Ok(TruncationReport { truncation: SeriesTruncation::new(order), overflow, ln_peak_term: ln_peak })
}

/// Tail L¹ bound together with its ingredients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailBoundReport {
    pub bound: f64,
    pub kappa: f64,
    pub omega_d: f64,
    /// `C(T,d,ν,H)` evaluated with the caller's constant `A`.
    pub c_const: f64,
    /// The unspecified multiplicative constant `A` (a rate shape, not a calibrated value).
    pub a_const: f64,
}

/// `κ(1) = e^{1−γ}`, `κ(d) = γ (d+1)^{1/(d−1)}` for `d > 1`.
pub fn kappa(d: usize) -> f64 {
    if d == 1 {
        (1.0 - EULER_GAMMA).exp()
    } else {
        EULER_GAMMA * ((d + 1) as f64).powf(1.0 / (d as f64 - 1.0))
    }
}

/// Surface area of the unit sphere in R^d, `2π^{d/2}/Γ(d/2)`.
pub fn sphere_area(d: usize) -> f64 {
    let half_d = 0.5 * d as f64;
    2.0 * PI.powf(half_d) * (-log_gamma_unchecked(half_d)).exp()
}

/// `Ω_d C/T^d · ((Tr+κ)^d − (Tr)^d)/(dκ) · e^{−Tr}` with
/// `C = A (T²/2)^{d/2} ν²/Γ(d/2) · (d+H)/(d(d+H))`.
pub fn tail_l1_bound(params: &SfbmParams, r: f64, a_const: f64) -> Result<TailBoundReport> {
    if !(r > 0.0) {
        return Err(Error::Domain("tail_l1_bound requires r > 0".into()));
    }
    let d = params.d;
    let df = d as f64;
    let half_d = 0.5 * df;
    let t = params.t;
    let kap = kappa(d);
    let omega = sphere_area(d);
    let c_const = a_const * (0.5 * t * t).powf(half_d) * params.nu2() * (-log_gamma_unchecked(half_d)).exp()
        * (df + params.h)
        / (df * (df + params.h));
    let tr = t * r;
    let poly = ((tr + kap).powi(d as i32) - tr.powi(d as i32)) / (df * kap);
    let bound = omega * c_const / t.powi(d as i32) * poly * (-tr).exp();
    Ok(TailBoundReport { bound, kappa: kap, omega_d: omega, c_const, a_const })
}

/// `log f(‖x‖)` and its gradient, for HMC on the raw frequency vector.
pub fn log_density_and_grad(params: &SfbmParams, x: &[f64], cfg: &SpectralEvalConfig) -> Result<(f64, Vec<f64>)> {
    if !is_positive_definite(params) {
        return Err(Error::Domain(format!(
            "spectral log-density requires positive-definite parameters (d={}, H={})",
            params.d, params.h
        )));
    }
    if x.len() != params.d {
        return Err(Error::DimensionMismatch { expected: params.d, got: x.len() });
    }
    let spec = SfbmSpectrum::for_params(params, *cfg);
    let t = params.t;
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (ln_phi, slope) = spec.log_profile_and_slope(norm * t);
    let scale = params.nu2() * t.powi(params.d as i32);
    let value = (scale.ln() + ln_phi).max(cfg.density_floor.ln());
    // ∂/∂x_i ln φ(‖x‖T) = T² · ((d ln φ/dy)/y) · x_i with y = ‖x‖T
    let grad = x.iter().map(|v| t * t * slope * v).collect();
    Ok((value, grad))
}

/// Literal numerical Fourier transform of the kernel by composite Simpson integration.
///
/// For d = 1 computes `(1/2π) ∫_{−T}^{T} C(h) cos(hr) dh`; in general
/// `(2π)^{−d/2} r^{1−d/2} ∫₀^T C(ρ) ρ^{d/2} J_{d/2−1}(rρ) dρ` (for d = 2 this is
/// `(1/(2π)²) 2π ∫₀^T C(ρ) J₀(rρ) ρ dρ`). The interval is split dyadically toward
/// ρ = 0 and each piece gets at least 64 panels and at least 1024 panels per period.
pub fn fourier_quadrature_oracle(params: &SfbmParams, r: f64) -> f64 {
    fourier_quadrature_oracle_with(params.d, params.t, r, |h| sfbm_kernel_eval(params, h))
}

/// The same transform for any radial kernel supported on `[0, support]`.
pub fn fourier_quadrature_oracle_with<K: Fn(f64) -> f64>(d: usize, support: f64, r: f64, kernel: K) -> f64 {
    let r = r.abs();
    let t = support;
    let half_d = 0.5 * d as f64;
    let period = if r > 0.0 { 2.0 * PI / r } else { f64::INFINITY };
    let mut acc = CompensatedSum::new();
    let mut hi = t;
    for level in 0..64 {
        let lo = if level == 63 { 0.0 } else { 0.5 * hi };
        let len = hi - lo;
        let panels = (64.0f64).max((len / period * 1024.0).ceil()) as usize;
        let piece = if d == 1 {
            simpson(lo, hi, panels, |h| kernel(h) * (h * r).cos())
        } else {
            simpson(lo, hi, panels, |rho| {
                let radial = if r == 0.0 {
                    // r^{1−d/2} J_{d/2−1}(rρ) → (ρ/2)^{d/2−1}/Γ(d/2)
                    (0.5 * rho).powf(half_d - 1.0) * (-log_gamma_unchecked(half_d)).exp()
                } else {
                    r.powf(1.0 - half_d) * bessel_j(half_d - 1.0, r * rho)
                };
                kernel(rho) * rho.powf(half_d) * radial
            })
        };
        acc.add(piece);
        hi = lo;
        if lo == 0.0 {
            break;
        }
    }
    if d == 1 {
        acc.value() / PI
    } else {
        (2.0 * PI).powf(-half_d) * acc.value()
    }
}

/// Profile argument up to which [`radial_mass`] integrates numerically.
pub const RADIAL_MASS_CUTOFF: f64 = 2000.0;

/// `∫_{R^d} φ(‖y‖) dy = Ω_d ∫₀^∞ x^{d−1} φ(x) dx`, which must equal 1/2 so that
/// `∫ f = ν²/2 = K(0)`.
///
/// Integrates numerically up to [`RADIAL_MASS_CUTOFF`] and adds the analytic tail:
/// the power law `Ω_d A X^{−2H}/(2H)` plus the leading oscillatory correction.
pub fn radial_mass(spec: &SfbmSpectrum) -> f64 {
    let x1 = RADIAL_MASS_CUTOFF;
    let body = radial_mass_between(spec, 0.0, x1);
    body + radial_tail_mass(spec, x1)
}

/// `Ω_d ∫_lo^hi x^{d−1} φ(x) dx`.
pub fn radial_mass_between(spec: &SfbmSpectrum, lo: f64, hi: f64) -> f64 {
    let d = spec.dimension();
    let omega = sphere_area(d);
    let theta = spec.config().series_switch_threshold;
    let rule = GaussLegendre::sixteen();
    let mut acc = CompensatedSum::new();
    let integrate_direct = |a: f64, b: f64, acc: &mut CompensatedSum| {
        let n = ((b - a) / (0.5 * PI)).ceil().max(1.0) as usize;
        let w = (b - a) / n as f64;
        for i in 0..n {
            let pa = a + i as f64 * w;
            acc.add(rule.integrate(pa, pa + w, |x| x.powi(d as i32 - 1) * spec.profile(x)));
        }
    };
    if d == 1 || hi <= theta {
        integrate_direct(lo, hi, &mut acc);
        return omega * acc.value();
    }
    let split = theta.max(lo);
    if lo < split {
        integrate_direct(lo, split, &mut acc);
    }
    let direct = omega * acc.value();
    direct + cumulative_radial_mass(spec, hi) - cumulative_radial_mass(spec, split)
}

/// `Ω_d ∫₀^X x^{d−1} φ(x) dx` from the exchanged-order form
/// `Ω_d (2π)^{−d/2} (1/2) X^{d/2} ∫₀¹ (1−v^{2H}) v^{d/2−1} J_{d/2}(Xv) dv`.
pub fn cumulative_radial_mass(spec: &SfbmSpectrum, big_x: f64) -> f64 {
    let d = spec.dimension();
    let half_d = 0.5 * d as f64;
    let two_h = 2.0 * spec.hurst();
    if big_x == 0.0 {
        return 0.0;
    }
    let integral = graded_oscillatory_integral(big_x, |v| {
        (1.0 - v.powf(two_h)) * v.powf(half_d - 1.0) * bessel_j(half_d, big_x * v)
    });
    sphere_area(d) * (2.0 * PI).powf(-half_d) * 0.5 * big_x.powf(half_d) * integral
}

/// `Ω_d ∫_X^∞ x^{d−1} φ(x) dx` from the large-x expansion.
pub fn radial_tail_mass(spec: &SfbmSpectrum, big_x: f64) -> f64 {
    let d = spec.dimension();
    let h = spec.hurst();
    let omega = sphere_area(d);
    let power = omega * spec.tail_coefficient() * big_x.powf(-2.0 * h) / (2.0 * h);
    if d == 1 {
        // φ ≈ … − (2H/2π) cos x / x², whose tail integral is ≈ (2H/2π) sin X / X².
        let osc = 2.0 * h / (2.0 * PI) * big_x.sin() / (big_x * big_x);
        return power + omega * osc;
    }
    // Endpoint term (2π)^{−d/2} H x^{−1−d/2} J_{d/2+1}(x) weighted by x^{d−1}; with
    // J ≈ √(2/(πx)) cos(x − ϕ), integrate g(x) cos(x − ϕ) by parts twice.
    let half_d = 0.5 * d as f64;
    let nu = half_d + 1.0;
    let phase = (0.5 * nu + 0.25) * PI;
    let expo = half_d - 2.5;
    let g = (2.0 / PI).sqrt() * big_x.powf(expo);
    let dg = expo * g / big_x;
    let s = (big_x - phase).sin();
    let c = (big_x - phase).cos();
    let osc = (2.0 * PI).powf(-half_d) * h * (-g * s - dg * c);
    power + omega * osc
}
