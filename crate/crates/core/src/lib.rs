//! Fast simulation of stochastic Volterra equations driven by positive-definite
//! kernels, using a random-Fourier-feature (RFF) representation of the kernel.
//!
//! The stationary fractional Brownian motion (S-fBM) kernel
//! `C(τ) = ν²/2 · (1 − (|τ|/T)^{2H}) · 1{|τ| ≤ T}` is fully supported:
//!
//! * [`specfun`]: log-Gamma, Pochhammer symbols, truncated Bessel and ₁F₂ series.
//! * [`kernel`]: S-fBM parameters, pointwise evaluation and the positive-definiteness
//!   predicate, plus the generic [`kernel::Kernel`] trait used by the simulation schemes.
//! * [`spectral`]: closed-form spectral densities, truncation orders, tail bounds,
//!   log-density gradients and an independent Fourier-quadrature oracle.
//! * [`hmc`]: Hamiltonian Monte Carlo with leapfrog integration and chain diagnostics.
//! * [`rff`]: feature sets, the empirical kernel `K̂_M`, feature maps and error reports.
//! * [`sampling`]: drawing feature sets from the S-fBM spectral density (HMC or inverse CDF).
//! * [`volterra`]: the O(N²) Euler scheme, the O(NM) RFF-Euler scheme and exact
//!   Cholesky simulation of Gaussian Volterra processes.
//! * [`estimation`]: GMM recovery of `(λ², H)` from autocovariances.
//! * [`analysis`]: weak/strong error studies, timing benchmarks, rate fits and the
//!   sum-of-exponentials comparator.

pub mod analysis;
pub mod error;
pub mod estimation;
pub mod hmc;
pub mod kernel;
pub mod quadrature;
pub mod rff;
pub mod sampling;
pub mod specfun;
pub mod spectral;
pub mod stats;
pub mod volterra;

pub use error::{Error, Result};
pub use kernel::{Kernel, SfbmParams};
pub use rff::FeatureSet;
pub use volterra::{SimPath, TimeGrid, VolatilitySpec};
