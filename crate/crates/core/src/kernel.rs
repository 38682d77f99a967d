//! The S-fBM covariance kernel and the scalar kernel interface used by the
//! simulation schemes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A stationary kernel evaluated at a scalar lag. Implementations only see `|τ|`.
pub trait Kernel {
    fn eval(&self, lag: f64) -> f64;

    fn k_at_zero(&self) -> f64 {
        self.eval(0.0)
    }

    /// `K(j·h)` for the exact multiple of a step.
    fn eval_steps(&self, j: usize, h: f64) -> f64 {
        self.eval(j as f64 * h)
    }

    /// `K(t − s)` for the exact difference of two nodes.
    fn eval_between(&self, t: f64, s: f64) -> f64 {
        self.eval(t - s)
    }
}

impl<K: Kernel + ?Sized> Kernel for &K {
    fn eval(&self, lag: f64) -> f64 {
        (**self).eval(lag)
    }
    fn k_at_zero(&self) -> f64 {
        (**self).k_at_zero()
    }
    fn eval_steps(&self, j: usize, h: f64) -> f64 {
        (**self).eval_steps(j, h)
    }
    fn eval_between(&self, t: f64, s: f64) -> f64 {
        (**self).eval_between(t, s)
    }
}

/// Wraps a closure as a [`Kernel`].
#[derive(Clone)]
pub struct FnKernel<F>(pub F);

impl<F: Fn(f64) -> f64> Kernel for FnKernel<F> {
    fn eval(&self, lag: f64) -> f64 {
        (self.0)(lag.abs())
    }
}

/// `K(τ) ≡ c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantKernel(pub f64);

impl Kernel for ConstantKernel {
    fn eval(&self, _lag: f64) -> f64 {
        self.0
    }
}

/// `K(τ) = c e^{−x|τ|}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentialKernel {
    pub weight: f64,
    pub rate: f64,
}

impl Kernel for ExponentialKernel {
    fn eval(&self, lag: f64) -> f64 {
        self.weight * (-self.rate * lag.abs()).exp()
    }
}

/// S-fBM parameters. λ² is stored; ν² = λ²/(H(1−2H)) is derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SfbmParams {
    #[serde(rename = "H")]
    pub h: f64,
    pub lambda2: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub d: usize,
}

impl SfbmParams {
    pub fn new(h: f64, lambda2: f64, t: f64, d: usize) -> Result<Self> {
        let p = SfbmParams { h, lambda2, t, d };
        p.validate()?;
        Ok(p)
    }

    /// Builds parameters from ν² instead of λ².
    pub fn from_nu2(h: f64, nu2: f64, t: f64, d: usize) -> Result<Self> {
        Self::new(h, lambda2_from_nu2(h, nu2)?, t, d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h < 0.5) {
            return Err(Error::Domain(format!("H must lie in (0, 1/2), got {}", self.h)));
        }
        if !(self.lambda2 > 0.0 && self.lambda2.is_finite()) {
            return Err(Error::Domain(format!("lambda2 must be positive, got {}", self.lambda2)));
        }
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(Error::Domain(format!("T must be positive, got {}", self.t)));
        }
        if self.d == 0 {
            return Err(Error::Domain("dimension d must be at least 1".into()));
        }
        Ok(())
    }

    pub fn nu2(&self) -> f64 {
        self.lambda2 / (self.h * (1.0 - 2.0 * self.h))
    }

    pub fn k0(&self) -> f64 {
        0.5 * self.nu2()
    }

    pub fn with_dimension(mut self, d: usize) -> Self {
        self.d = d;
        self
    }
}

impl Kernel for SfbmParams {
    fn eval(&self, lag: f64) -> f64 {
        sfbm_kernel_eval(self, lag)
    }

    fn k_at_zero(&self) -> f64 {
        self.k0()
    }
}

/// ν² = λ²/(H(1−2H)).
pub fn nu2_from_lambda2(h: f64, lambda2: f64) -> Result<f64> {
    if !(h > 0.0 && h < 0.5) {
        return Err(Error::Domain(format!("H must lie in (0, 1/2), got {h}")));
    }
    Ok(lambda2 / (h * (1.0 - 2.0 * h)))
}

/// λ² = ν² H (1−2H).
pub fn lambda2_from_nu2(h: f64, nu2: f64) -> Result<f64> {
    if !(h > 0.0 && h < 0.5) {
        return Err(Error::Domain(format!("H must lie in (0, 1/2), got {h}")));
    }
    Ok(nu2 * h * (1.0 - 2.0 * h))
}

/// `C(τ) = ν²/2 · (1 − (|τ|/T)^{2H})` on `|τ| ≤ T`, zero beyond.
pub fn sfbm_kernel_eval(params: &SfbmParams, tau: f64) -> f64 {
    let a = tau.abs();
    if a > params.t {
        return 0.0;
    }
    let k0 = params.k0();
    if a == 0.0 {
        return k0;
    }
    // 1 − s^{2H} = −expm1(2H ln s) keeps precision for s close to 1.
    -k0 * (2.0 * params.h * (a / params.t).ln()).exp_m1()
}

/// Whether `0 < H ≤ (3−d)/4`, the exact positive-definiteness region of the S-fBM
/// kernel in R^d. Accepts H up to 1/2 so the boundary itself can be queried.
pub fn pd_condition(d: usize, h: f64) -> bool {
    d >= 1 && h > 0.0 && h <= (3.0 - d as f64) / 4.0
}

/// Positive definiteness of the kernel `C(‖x‖)` on R^d.
pub fn is_positive_definite(params: &SfbmParams) -> bool {
    pd_condition(params.d, params.h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_params() -> SfbmParams {
        SfbmParams::from_nu2(0.1, 50.0, 100.0, 1).unwrap()
    }

    #[test]
    fn nu2_examples() {
        assert!((nu2_from_lambda2(0.1, 0.02).unwrap() - 0.25).abs() < 1e-15);
        assert!((nu2_from_lambda2(0.1, 0.01).unwrap() - 0.125).abs() < 1e-15);
        assert_eq!(nu2_from_lambda2(0.25, 0.3).unwrap(), 8.0 * 0.3);
        assert!(nu2_from_lambda2(0.5, 0.1).is_err());
        assert!(nu2_from_lambda2(0.0, 0.1).is_err());
    }

    #[test]
    fn kernel_examples() {
        let p = reference_params();
        assert!((sfbm_kernel_eval(&p, 0.0) - 25.0).abs() < 1e-12);
        assert_eq!(sfbm_kernel_eval(&p, 100.0), 0.0);
        assert_eq!(sfbm_kernel_eval(&p, 150.0), 0.0);
        let expected = 25.0 * (1.0 - 10f64.powf(-0.4));
        assert!((sfbm_kernel_eval(&p, 1.0) - expected).abs() < 1e-12);
        assert!((sfbm_kernel_eval(&p, 1.0) - 15.0473).abs() < 1e-4);
    }

    #[test]
    fn k0_is_half_nu2() {
        let p = SfbmParams::new(0.17, 0.031, 12.0, 1).unwrap();
        assert_eq!(sfbm_kernel_eval(&p, 0.0), nu2_from_lambda2(0.17, 0.031).unwrap() / 2.0);
    }

    #[test]
    fn pd_truth_table() {
        assert!(pd_condition(1, 0.49));
        assert!(pd_condition(1, 0.5));
        assert!(pd_condition(2, 0.25));
        assert!(!pd_condition(2, 0.26));
        assert!(!pd_condition(2, 0.3));
        assert!(!pd_condition(3, 0.01));
        let p = SfbmParams::new(0.1, 0.02, 10.0, 3).unwrap();
        assert!(!is_positive_definite(&p));
    }

    #[test]
    fn params_round_trip_json() {
        let p = SfbmParams::new(0.1, 0.02, 100.0, 2).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"H":0.1,"lambda2":0.02,"T":100.0,"d":2}"#);
        let q: SfbmParams = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
    }
}
