//! Special functions needed by the S-fBM spectral density.
//!
//! All series are accumulated term by term with a ratio recurrence (no fresh
//! factorials) and compensated summation. The `*_oscillatory` variants run the same
//! recurrences in double-double arithmetic for arguments where the alternating
//! terms peak many orders of magnitude above the sum.

mod dd;

pub use dd::Dd;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Number of retained terms beyond index 0 in a truncated series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeriesTruncation {
    pub order: usize,
}

impl SeriesTruncation {
    pub const fn new(order: usize) -> Self {
        SeriesTruncation { order }
    }
}

/// Neumaier's variant of Kahan summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ζ(k) for k = 2..=40 by Euler–Maclaurin summation.
fn zeta_table() -> &'static [f64; 41] {
    static TABLE: OnceLock<[f64; 41]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut out = [0.0; 41];
        let n = 40.0_f64;
        for (k, slot) in out.iter_mut().enumerate().skip(2) {
            let s = k as f64;
            let mut acc = CompensatedSum::new();
            for j in (1..40).rev() {
                acc.add((j as f64).powf(-s));
            }
            // Tail Σ_{j≥n} j^{-s} with Bernoulli corrections B2 through B8.
            acc.add(n.powf(1.0 - s) / (s - 1.0));
            acc.add(0.5 * n.powf(-s));
            acc.add(s / 12.0 * n.powf(-s - 1.0));
            acc.add(-s * (s + 1.0) * (s + 2.0) / 720.0 * n.powf(-s - 3.0));
            let rising5 = s * (s + 1.0) * (s + 2.0) * (s + 3.0) * (s + 4.0);
            acc.add(rising5 / 30240.0 * n.powf(-s - 5.0));
            acc.add(-rising5 * (s + 5.0) * (s + 6.0) / 1_209_600.0 * n.powf(-s - 7.0));
            *slot = acc.value();
        }
        out
    })
}

/// ln Γ(1 + z) for |z| ≤ 0.25 via its Taylor series in ζ values.
fn ln_gamma_1p_small(z: f64) -> f64 {
    let zeta = zeta_table();
    let mut acc = CompensatedSum::new();
    acc.add(-EULER_GAMMA * z);
    // pk = (−z)^k
    let mut pk = -z;
    for (k, zeta_k) in zeta.iter().enumerate().skip(2) {
        pk *= -z;
        let term = zeta_k * pk / k as f64;
        acc.add(term);
        if term.abs() < 1e-18 * acc.value().abs().max(1e-300) {
            break;
        }
    }
    acc.value()
}

fn ln_gamma_lanczos(x: f64) -> f64 {
    let x = x - 1.0;
    let mut a = LANCZOS_COEF[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn ln_gamma_stirling(x: f64) -> f64 {
    const B: [f64; 8] = [
        1.0 / 12.0,
        -1.0 / 360.0,
        1.0 / 1260.0,
        -1.0 / 1680.0,
        1.0 / 1188.0,
        -691.0 / 360_360.0,
        1.0 / 156.0,
        -3617.0 / 122_400.0,
    ];
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut corr = 0.0;
    let mut p = inv;
    for b in B {
        corr += b * p;
        p *= inv2;
    }
    (x - 0.5) * x.ln() - x + 0.5 * (2.0 * PI).ln() + corr
}

/// Natural logarithm of the Gamma function for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("log_gamma requires x > 0, got {x}")));
    }
    Ok(log_gamma_unchecked(x))
}

pub(crate) fn log_gamma_unchecked(x: f64) -> f64 {
    if (x - 1.0).abs() <= 0.25 {
        ln_gamma_1p_small(x - 1.0)
    } else if (x - 2.0).abs() <= 0.25 {
        let z = x - 2.0;
        z.ln_1p() + ln_gamma_1p_small(z)
    } else if x < 0.75 {
        // Γ(x) = Γ(x + 1) / x
        log_gamma_unchecked(x + 1.0) - x.ln()
    } else if x >= 15.0 {
        ln_gamma_stirling(x)
    } else {
        ln_gamma_lanczos(x)
    }
}

/// Γ(x) for `x > 0`.
pub fn gamma(x: f64) -> Result<f64> {
    log_gamma(x).map(f64::exp)
}

/// Rising factorial `(a)_n = a (a+1) ⋯ (a+n−1)`.
pub fn pochhammer(a: f64, n: usize) -> f64 {
    let mut p = 1.0;
    for k in 0..n {
        p *= a + k as f64;
        if !p.is_finite() {
            if a > 0.0 {
                return (log_gamma_unchecked(a + n as f64) - log_gamma_unchecked(a)).exp();
            }
            return p;
        }
    }
    p
}

/// Partial sum `Σ_{m=0}^{N} (−1)^m / (m! Γ(m+ν+1)) (x/2)^{2m+ν}` of the Bessel series.
///
/// For `x > 8` the terms and their sum are carried in double-double arithmetic.
pub fn bessel_j_truncated(nu: f64, x: f64, trunc: SeriesTruncation) -> f64 {
    let half = 0.5 * x;
    let lead = half.powf(nu) / gamma_positive(nu + 1.0);
    if x <= 8.0 {
        let mut term = lead;
        let q = -half * half;
        let mut acc = CompensatedSum::new();
        acc.add(term);
        for m in 0..trunc.order {
            let m1 = (m + 1) as f64;
            term *= q / (m1 * (m1 + nu));
            acc.add(term);
        }
        return acc.value();
    }
    let q = -Dd::square_f64(half);
    let mut term = Dd::ONE;
    let mut acc = Dd::ONE;
    for m in 0..trunc.order {
        let m1 = (m + 1) as f64;
        term = term * q / Dd::new(m1).mul_f64(m1 + nu);
        acc = acc + term;
    }
    lead * acc.to_f64()
}

fn gamma_positive(x: f64) -> f64 {
    log_gamma_unchecked(x).exp()
}

/// A truncated ₁F₂ sum together with the magnitude of its last retained term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesValue {
    pub value: f64,
    pub last_term: f64,
}

/// `Σ_{k=0}^{N} (a)_k / ((b₁)_k (b₂)_k) z^k / k!`.
pub fn hyp1f2_truncated(a: f64, b1: f64, b2: f64, z: f64, trunc: SeriesTruncation) -> SeriesValue {
    let mut term = 1.0;
    let mut acc = CompensatedSum::new();
    acc.add(term);
    for k in 0..trunc.order {
        let kf = k as f64;
        term *= (a + kf) * z / ((b1 + kf) * (b2 + kf) * (kf + 1.0));
        acc.add(term);
    }
    SeriesValue { value: acc.value(), last_term: term.abs() }
}

/// d/dz ₁F₂(a; b₁, b₂; z) = a/(b₁b₂) · ₁F₂(a+1; b₁+1, b₂+1; z), truncated at the same order.
pub fn hyp1f2_derivative(a: f64, b1: f64, b2: f64, z: f64, trunc: SeriesTruncation) -> f64 {
    a / (b1 * b2) * hyp1f2_truncated(a + 1.0, b1 + 1.0, b2 + 1.0, z, trunc).value
}

/// ₁F₂(a; b₁, b₂; −x²/4) summed to order N in double-double arithmetic.
///
/// The argument is passed as `x` so that `x²/4` is formed exactly. Terms peak
/// near `k ≈ x/2` at roughly `e^x` times the sum, so this stays accurate to well
/// below 1e−12 relative for `x` up to about 50.
pub fn hyp1f2_oscillatory(a: f64, b1: f64, b2: f64, x: f64, trunc: SeriesTruncation) -> SeriesValue {
    let z = -Dd::square_f64(x).mul_f64(0.25);
    let mut term = Dd::ONE;
    let mut acc = Dd::ONE;
    for k in 0..trunc.order {
        let kf = k as f64;
        let num = Dd::new(a).add_f64(kf) * z;
        let den = (Dd::new(b1).add_f64(kf) * Dd::new(b2).add_f64(kf)).mul_f64(kf + 1.0);
        term = term * num / den;
        acc = acc + term;
    }
    SeriesValue { value: acc.to_f64(), last_term: term.to_f64().abs() }
}

/// Ratio `|t_{k+1} / t_k|` of consecutive ₁F₂ terms.
#[inline]
pub(crate) fn hyp1f2_term_ratio(a: f64, b1: f64, b2: f64, z_abs: f64, k: usize) -> f64 {
    let kf = k as f64;
    ((a + kf) * z_abs / ((b1 + kf) * (b2 + kf) * (kf + 1.0))).abs()
}

/// Bessel function of the first kind `J_ν(x)` for `x ≥ 0` and moderate real order
/// (`ν > −1`, `|ν| ≲ 10`), accurate to about 1e−14 absolute.
///
/// Power series in doubles for `x ≤ 8`, in double-double up to `x ≤ 30`, Hankel's
/// asymptotic expansion beyond.
pub fn bessel_j(nu: f64, x: f64) -> f64 {
    let x = x.abs();
    if x == 0.0 {
        return if nu == 0.0 { 1.0 } else { 0.0 };
    }
    if x <= 8.0 {
        let half = 0.5 * x;
        let q = -half * half;
        let mut term = half.powf(nu) / gamma_positive(nu + 1.0);
        let mut acc = CompensatedSum::new();
        acc.add(term);
        let mut m = 0usize;
        loop {
            let m1 = (m + 1) as f64;
            term *= q / (m1 * (m1 + nu));
            acc.add(term);
            m += 1;
            if term.abs() < 1e-18 * acc.value().abs().max(1e-300) && m1 > half {
                break;
            }
            if m > 200 {
                break;
            }
        }
        acc.value()
    } else if x <= 30.0 && nu.fract() == 0.0 && nu >= 0.0 {
        bessel_j_miller(nu as usize, x)
    } else if x <= 30.0 {
        bessel_j_series_dd(nu, x)
    } else {
        bessel_j_hankel(nu, x)
    }
}

fn bessel_j_series_dd(nu: f64, x: f64) -> f64 {
    let half = 0.5 * x;
    let q = -Dd::square_f64(half);
    let lead = half.powf(nu) / gamma_positive(nu + 1.0);
    let mut term = Dd::ONE;
    let mut acc = Dd::ONE;
    let mut m = 0usize;
    loop {
        let m1 = (m + 1) as f64;
        term = term * q / Dd::new(m1).mul_f64(m1 + nu);
        acc = acc + term;
        m += 1;
        if m1 > half && term.hi.abs() < 1e-34 * acc.hi.abs().max(1e-300) {
            break;
        }
        if m > 400 {
            break;
        }
    }
    lead * acc.to_f64()
}

/// Integer-order `J_n(x)` by Miller's backward recurrence, normalized with
/// `J_0 + 2 Σ J_{2k} = 1`.
fn bessel_j_miller(n: usize, x: f64) -> f64 {
    let start = 2 * ((n.max(x as usize) + 40) / 2);
    let mut next = 0.0;
    let mut cur = 1e-300;
    let mut norm = 0.0;
    let mut out = 0.0;
    for k in (1..=start).rev() {
        // cur = J_k, next = J_{k+1} up to a common scale
        let prev = 2.0 * k as f64 / x * cur - next;
        next = cur;
        cur = prev;
        if k - 1 == n {
            out = cur;
        }
        if (k - 1) % 2 == 0 && k - 1 > 0 {
            norm += 2.0 * cur;
        }
        if cur.abs() > 1e250 {
            cur *= 1e-250;
            next *= 1e-250;
            out *= 1e-250;
            norm *= 1e-250;
        }
    }
    norm += cur;
    out / norm
}

fn bessel_j_hankel(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut p = CompensatedSum::new();
    let mut q = CompensatedSum::new();
    let mut a = 1.0;
    p.add(1.0);
    let mut prev = f64::INFINITY;
    for k in 1..200 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        a *= (mu - odd * odd) / (kf * 8.0 * x);
        if a == 0.0 {
            break;
        }
        if a.abs() > prev && kf > nu {
            break;
        }
        prev = a.abs();
        // a_k / x^k carries the sign pattern (−1)^{⌊k/2⌋} split between P and Q.
        match k % 4 {
            0 => p.add(a),
            1 => q.add(a),
            2 => p.add(-a),
            _ => q.add(-a),
        }
        if a.abs() < 1e-18 {
            break;
        }
    }
    let phase = (0.5 * nu + 0.25) * PI;
    let (sx, cx) = x.sin_cos();
    let (sp, cp) = phase.sin_cos();
    let cos_chi = cx * cp + sx * sp;
    let sin_chi = sx * cp - cx * sp;
    (2.0 / (PI * x)).sqrt() * (p.value() * cos_chi - q.value() * sin_chi)
}
