//! Simulation of `X_t = x₀ + ∫₀ᵗ K(t−s) σ(s, X_s) dW_s`.
//!
//! Three schemes share one contract: the standard normal draws are generated
//! outside and passed in, so two schemes fed the same draws are coupled.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::rff::{phase, FeatureSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// Grid from explicit nodes; must start at 0 and increase strictly.
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Config("a time grid needs at least two nodes".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::Config(format!("time grid must start at 0, got {}", times[0])));
        }
        if times.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(Error::Config("time grid must be strictly increasing and finite".into()));
        }
        Ok(TimeGrid { times })
    }

    /// `n` equal steps on `[0, horizon]`.
    pub fn uniform(n: usize, horizon: f64) -> Result<Self> {
        if n == 0 || !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!("uniform grid needs n ≥ 1 and a positive horizon, got n={n}, T_f={horizon}")));
        }
        let times = (0..=n).map(|i| horizon * i as f64 / n as f64).collect();
        TimeGrid::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of nodes, `N + 1`.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Constant step size, if the grid is uniform to rounding.
    pub fn uniform_step(&self) -> Option<f64> {
        let dt = self.horizon() / self.steps() as f64;
        let uniform = self
            .times
            .iter()
            .enumerate()
            .all(|(i, &t)| (t - i as f64 * dt).abs() <= 1e-12 * self.horizon());
        uniform.then_some(dt)
    }
}

/// Diffusion coefficient `σ(t, x)`. Only the affine form is serializable.
#[derive(Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolatilitySpec {
    /// `σ(t, x) = σ₀ (1 + βx)`.
    Affine { sigma0: f64, beta: f64 },
    #[serde(skip)]
    Custom(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl VolatilitySpec {
    pub fn affine(sigma0: f64, beta: f64) -> Self {
        VolatilitySpec::Affine { sigma0, beta }
    }

    pub fn custom<F: Fn(f64, f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        VolatilitySpec::Custom(Arc::new(f))
    }

    #[inline]
    pub fn sigma(&self, t: f64, x: f64) -> f64 {
        match self {
            VolatilitySpec::Affine { sigma0, beta } => sigma0 * (1.0 + beta * x),
            VolatilitySpec::Custom(f) => f(t, x),
        }
    }
}

impl fmt::Debug for VolatilitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VolatilitySpec::Affine { sigma0, beta } => write!(f, "Affine {{ sigma0: {sigma0}, beta: {beta} }}"),
            VolatilitySpec::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPath {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
    /// `G₁ … G_N`.
    pub gaussians: Vec<f64>,
    pub seed: Option<u64>,
}

impl SimPath {
    pub fn terminal(&self) -> f64 {
        *self.values.last().unwrap()
    }
}

/// `n` standard normal draws from the ChaCha8 stream seeded with `seed`.
pub fn generate_gaussians(n: usize, seed: u64) -> Vec<f64> {
    generate_gaussians_stream(n, seed, 0)
}

/// Draws from stream `stream` of the generator seeded with `seed`. Distinct streams of
/// one seed never overlap, so path `i` of an ensemble uses `(seed_base, i)`.
pub fn generate_gaussians_stream(n: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Deterministic child seed for `(tag, index)` under `master` (SplitMix64 finalizer).
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_gaussians(grid: &TimeGrid, gaussians: &[f64]) -> Result<()> {
    if gaussians.len() < grid.steps() {
        return Err(Error::DimensionMismatch { expected: grid.steps(), got: gaussians.len() });
    }
    Ok(())
}

/// The O(N²) Euler scheme:
/// `X_{t_n} = x₀ + Σ_{i<n} K(t_n − t_i) σ(t_i, X_{t_i}) √(t_{i+1} − t_i) G_{i+1}`.
/// Lags are the exact node differences, or exact multiples of the step on uniform grids.
pub fn euler_simulate<K: Kernel + ?Sized>(
    kernel: &K,
    vol: &VolatilitySpec,
    grid: &TimeGrid,
    x0: f64,
    gaussians: &[f64],
) -> Result<SimPath> {
    check_gaussians(grid, gaussians)?;
    let t = grid.times();
    let n = grid.steps();
    let mut values = Vec::with_capacity(n + 1);
    values.push(x0);
    let mut increments = Vec::with_capacity(n);
    let dt = grid.uniform_step();
    for k in 0..n {
        let xk = values[k];
        increments.push(vol.sigma(t[k], xk) * (t[k + 1] - t[k]).sqrt() * gaussians[k]);
        let tn = t[k + 1];
        let mut acc = 0.0;
        for (i, (ti, inc)) in t.iter().zip(&increments).enumerate() {
            let kv = match dt {
                Some(h) => kernel.eval_steps(k + 1 - i, h),
                None => kernel.eval_between(tn, *ti),
            };
            acc += kv * inc;
        }
        values.push(x0 + acc);
    }
    Ok(SimPath { grid: grid.clone(), values, gaussians: gaussians[..n].to_vec(), seed: None })
}

const LANES: usize = 8;

/// Eight features in the rotating frame: `Y_m = e^{iη_m t_n}(C̃^m − i S̃^m)` and the
/// per-step rotation `e^{iη_m Δt}`. Padding lanes carry a zero rotation, so they stay 0.
#[derive(Clone, Copy, Default)]
struct RotatingBlock {
    re: [f64; LANES],
    im: [f64; LANES],
    rot_c: [f64; LANES],
    rot_s: [f64; LANES],
}

/// Steps fused into one pass over the blocks.
const CHUNK: usize = 4;

#[inline(always)]
fn rotate(x: f64, y: f64, c: f64, s: f64) -> (f64, f64) {
    (x * c - y * s, x * s + y * c)
}

/// One step `Y ← e^{iηΔt}(Y + a)` over all blocks, returning `Σ Re Y`.
fn rotate_blocks(blocks: &mut [RotatingBlock], a: f64) -> f64 {
    let mut acc = [0.0f64; LANES];
    for b in blocks.iter_mut() {
        for l in 0..LANES {
            let (re, im) = rotate(b.re[l] + a, b.im[l], b.rot_c[l], b.rot_s[l]);
            b.re[l] = re;
            b.im[l] = im;
            acc[l] += re;
        }
    }
    lane_sum(&acc)
}

fn lane_sum(acc: &[f64; LANES]) -> f64 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// `CHUNK` steps `Y ← e^{iηΔt}(Y + a_l)` in one pass, returning `Σ Re(e^{ijηΔt} Y)` for
/// `j = 1..=CHUNK`, i.e. the part of the next `CHUNK` states already determined by `Y`.
fn advance_blocks(blocks: &mut [RotatingBlock], a: &[f64; CHUNK]) -> [f64; CHUNK] {
    let mut acc = [[0.0f64; LANES]; CHUNK];
    for b in blocks.iter_mut() {
        for l in 0..LANES {
            let (c, s) = (b.rot_c[l], b.rot_s[l]);
            let (mut x, mut y) = (b.re[l], b.im[l]);
            for &al in a {
                (x, y) = rotate(x + al, y, c, s);
            }
            b.re[l] = x;
            b.im[l] = y;
            for acc_j in acc.iter_mut() {
                (x, y) = rotate(x, y, c, s);
                acc_j[l] += x;
            }
        }
    }
    acc.map(|a| lane_sum(&a))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn advance_blocks_avx2(blocks: &mut [RotatingBlock], a: &[f64; CHUNK]) -> [f64; CHUNK] {
    use std::arch::x86_64::*;
    let av = a.map(|v| _mm256_set1_pd(v));
    let mut acc = [_mm256_setzero_pd(); CHUNK];
    for b in blocks.iter_mut() {
        let (re, im) = (b.re.as_mut_ptr(), b.im.as_mut_ptr());
        let (cp, sp) = (b.rot_c.as_ptr(), b.rot_s.as_ptr());
        for off in [0, 4] {
            let (c, s) = (_mm256_loadu_pd(cp.add(off)), _mm256_loadu_pd(sp.add(off)));
            let rot = |x: __m256d, y: __m256d| {
                (_mm256_fmsub_pd(x, c, _mm256_mul_pd(y, s)), _mm256_fmadd_pd(x, s, _mm256_mul_pd(y, c)))
            };
            let (mut x, mut y) = (_mm256_loadu_pd(re.add(off)), _mm256_loadu_pd(im.add(off)));
            for al in &av {
                (x, y) = rot(_mm256_add_pd(x, *al), y);
            }
            _mm256_storeu_pd(re.add(off), x);
            _mm256_storeu_pd(im.add(off), y);
            for acc_j in acc.iter_mut() {
                (x, y) = rot(x, y);
                *acc_j = _mm256_add_pd(*acc_j, x);
            }
        }
    }
    acc.map(|v| {
        let mut lanes = [0.0f64; 4];
        _mm256_storeu_pd(lanes.as_mut_ptr(), v);
        (lanes[0] + lanes[1]) + (lanes[2] + lanes[3])
    })
}

#[inline]
fn advance(blocks: &mut [RotatingBlock], a: &[f64; CHUNK], simd: bool) -> [f64; CHUNK] {
    #[cfg(target_arch = "x86_64")]
    if simd {
        // SAFETY: callers pass `simd` only when AVX2 and FMA were detected.
        return unsafe { advance_blocks_avx2(blocks, a) };
    }
    let _ = simd;
    advance_blocks(blocks, a)
}

/// Runs the uniform-grid recursion `CHUNK` steps per pass. With `S_j = Σ Re(R^j Y_n)`
/// and `P_j = Σ Re R^j` for the rotation `R = e^{iηΔt}`,
/// `X_{n+i} = x₀ + scale·(S_i + Σ_{l<i} a_{n+l} P_{i−l})`, so every state in a chunk is
/// known before the pass that moves `Y_n` to `Y_{n+CHUNK}`.
fn rotating_steps(
    blocks: &mut [RotatingBlock],
    vol: &VolatilitySpec,
    t: &[f64],
    gaussians: &[f64],
    x0: f64,
    scale: f64,
    values: &mut Vec<f64>,
) {
    let simd = simd_available();
    let mut powers = [[0.0f64; LANES]; CHUNK];
    for b in blocks.iter() {
        for l in 0..LANES {
            let (mut x, mut y) = (1.0, 0.0);
            for p in powers.iter_mut() {
                (x, y) = rotate(x, y, b.rot_c[l], b.rot_s[l]);
                p[l] += x;
            }
        }
    }
    let powers = powers.map(|p| lane_sum(&p));
    let n = t.len() - 1;
    let mut ahead = [0.0; CHUNK];
    let mut a = [0.0; CHUNK];
    let mut k = 0;
    while k + CHUNK <= n {
        for i in 0..CHUNK {
            a[i] = vol.sigma(t[k + i], values[k + i]) * (t[k + i + 1] - t[k + i]).sqrt() * gaussians[k + i];
            let mut acc = ahead[i];
            for l in 0..=i {
                acc += a[l] * powers[i - l];
            }
            values.push(x0 + scale * acc);
        }
        ahead = advance(blocks, &a, simd);
        k += CHUNK;
    }
    for k in k..n {
        let a = vol.sigma(t[k], values[k]) * (t[k + 1] - t[k]).sqrt() * gaussians[k];
        values.push(x0 + scale * rotate_blocks(blocks, a));
    }
}

fn simd_available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// The O(NM) RFF scheme: running sums `C̃^m += cos(η_m t_n) a_n`, `S̃^m += sin(η_m t_n) a_n`
/// with `a_n = σ(t_n, X_n) √Δt G_{n+1}`, recombined as
/// `X_{n+1} = x₀ + (K(0)/M) Σ_m [cos(η_m t_{n+1}) C̃^m + sin(η_m t_{n+1}) S̃^m]`.
///
/// On uniform grids the pair `(C̃^m, S̃^m)` is carried in the frame rotating with `t`,
/// `Y_m = e^{iη_m t_{n+1}}(C̃^m − i S̃^m)`, so a step is `Y_m ← e^{iη_m Δt}(Y_m + a_n)` and
/// the recombination is `Σ_m Re Y_m`. Other grids use the sums and phasors directly.
pub fn rff_euler_simulate(
    features: &FeatureSet,
    vol: &VolatilitySpec,
    grid: &TimeGrid,
    x0: f64,
    gaussians: &[f64],
) -> Result<SimPath> {
    if features.dimension() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: features.dimension() });
    }
    check_gaussians(grid, gaussians)?;
    let eta = features.frequencies();
    let scale = features.k0() / eta.len() as f64;
    let t = grid.times();
    let n = grid.steps();
    let mut values = Vec::with_capacity(n + 1);
    values.push(x0);
    match grid.uniform_step() {
        Some(dt) => {
            let mut blocks = vec![RotatingBlock::default(); eta.len().div_ceil(LANES)];
            for (j, &e) in eta.iter().enumerate() {
                let b = &mut blocks[j / LANES];
                let (s, c) = phase(e, dt);
                b.rot_c[j % LANES] = c;
                b.rot_s[j % LANES] = s;
            }
            rotating_steps(&mut blocks, vol, t, gaussians, x0, scale, &mut values);
        }
        None => {
            let mut cos_t = vec![1.0; eta.len()];
            let mut sin_t = vec![0.0; eta.len()];
            let mut c_sum = vec![0.0; eta.len()];
            let mut s_sum = vec![0.0; eta.len()];
            for k in 0..n {
                let a = vol.sigma(t[k], values[k]) * (t[k + 1] - t[k]).sqrt() * gaussians[k];
                let tn = t[k + 1];
                let mut acc = 0.0;
                for j in 0..eta.len() {
                    c_sum[j] += cos_t[j] * a;
                    s_sum[j] += sin_t[j] * a;
                    let (s, c) = phase(eta[j], tn);
                    cos_t[j] = c;
                    sin_t[j] = s;
                    acc += c * c_sum[j] + s * s_sum[j];
                }
                values.push(x0 + scale * acc);
            }
        }
    }
    Ok(SimPath { grid: grid.clone(), values, gaussians: gaussians[..n].to_vec(), seed: None })
}

/// Trapezoid weights for `∫₀^{t_k} g(u) du` on the grid nodes `t_0 … t_k`.
fn trapezoid_weight(t: &[f64], k: usize, i: usize) -> f64 {
    let left = if i > 0 { t[i] - t[i - 1] } else { 0.0 };
    let right = if i < k { t[i + 1] - t[i] } else { 0.0 };
    0.5 * (left + right)
}

/// Covariance of a Gaussian Volterra process at nodes `t_1 … t_N`,
/// `Cov(X_t, X_s) = ∫₀^{t∧s} K(t−u) K(s−u) σ(u)² du`, by the trapezoid rule on the grid.
pub fn gaussian_volterra_covariance<K: Kernel + ?Sized, S: Fn(f64) -> f64>(
    kernel: &K,
    vol_sigma: &S,
    grid: &TimeGrid,
) -> Vec<Vec<f64>> {
    let t = grid.times();
    let n = grid.steps();
    let sig2: Vec<f64> = t.iter().map(|&u| vol_sigma(u).powi(2)).collect();
    let mut cov = vec![vec![0.0; n]; n];
    for a in 1..=n {
        for b in 1..=a {
            let mut s = 0.0;
            for i in 0..=b {
                s += trapezoid_weight(t, b, i) * kernel.eval(t[a] - t[i]) * kernel.eval(t[b] - t[i]) * sig2[i];
            }
            cov[a - 1][b - 1] = s;
            cov[b - 1][a - 1] = s;
        }
    }
    cov
}

/// Mean `x₀ + ∫₀^t K(t−u) b(u) du` at every node, by the trapezoid rule.
pub fn gaussian_volterra_mean<K: Kernel + ?Sized, B: Fn(f64) -> f64>(
    kernel: &K,
    drift_b: &B,
    grid: &TimeGrid,
    x0: f64,
) -> Vec<f64> {
    let t = grid.times();
    (0..t.len())
        .map(|k| x0 + (0..=k).map(|i| trapezoid_weight(t, k, i) * kernel.eval(t[k] - t[i]) * drift_b(t[i])).sum::<f64>())
        .collect()
}

/// Lower-triangular `L` with `L Lᵀ = A`, or the 1-based index of the first
/// non-positive leading minor.
fn cholesky_lower(a: &[Vec<f64>], jitter: f64) -> std::result::Result<Vec<Vec<f64>>, usize> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut d = a[j][j] + jitter;
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        if !(d > 0.0) {
            return Err(j + 1);
        }
        let djj = d.sqrt();
        l[j][j] = djj;
        for i in j + 1..n {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / djj;
        }
    }
    Ok(l)
}

/// Factorizes `cov`, escalating the diagonal jitter `1e−12 ‖Σ‖ · 10^j` for `j = 0..=6`
/// after a failed plain attempt. Returns the factor and the jitter used.
pub fn cholesky_with_jitter(cov: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, f64)> {
    let norm = cov.iter().flat_map(|r| r.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let mut last_minor = match cholesky_lower(cov, 0.0) {
        Ok(l) => return Ok((l, 0.0)),
        Err(minor) => minor,
    };
    let mut jitter = 0.0;
    for j in 0..=6 {
        jitter = 1e-12 * norm.max(f64::MIN_POSITIVE) * 10f64.powi(j);
        match cholesky_lower(cov, jitter) {
            Ok(l) => return Ok((l, jitter)),
            Err(minor) => last_minor = minor,
        }
    }
    Err(Error::Factorization { leading_minor: last_minor, jitter })
}

/// Exact-in-law simulation of the Gaussian Volterra process
/// `X_t = x₀ + ∫₀ᵗ K(t−u) b(u) du + ∫₀ᵗ K(t−u) σ(u) dW_u` at the grid nodes: `m + L g`.
pub fn cholesky_gaussian_simulate<K: Kernel + ?Sized, B: Fn(f64) -> f64, S: Fn(f64) -> f64>(
    kernel: &K,
    drift_b: &B,
    vol_sigma: &S,
    grid: &TimeGrid,
    x0: f64,
    gaussians: &[f64],
) -> Result<SimPath> {
    check_gaussians(grid, gaussians)?;
    let cov = gaussian_volterra_covariance(kernel, vol_sigma, grid);
    let (l, _) = cholesky_with_jitter(&cov)?;
    let mean = gaussian_volterra_mean(kernel, drift_b, grid, x0);
    Ok(path_from_factor(&l, &mean, grid, gaussians))
}

/// `m + L g` for a precomputed factor; reuse across paths of an ensemble.
pub fn path_from_factor(l: &[Vec<f64>], mean: &[f64], grid: &TimeGrid, gaussians: &[f64]) -> SimPath {
    let n = grid.steps();
    let mut values = Vec::with_capacity(n + 1);
    values.push(mean[0]);
    for (i, row) in l.iter().enumerate() {
        let s: f64 = row[..=i].iter().zip(gaussians).map(|(a, g)| a * g).sum();
        values.push(mean[i + 1] + s);
    }
    SimPath { grid: grid.clone(), values, gaussians: gaussians[..n].to_vec(), seed: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{ConstantKernel, FnKernel, SfbmParams};

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(vec![0.0, 1.0, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.1, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.0]).is_err());
        let g = TimeGrid::uniform(4, 2.0).unwrap();
        assert_eq!(g.times(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(g.uniform_step(), Some(0.5));
        assert_eq!(TimeGrid::new(vec![0.0, 0.1, 0.5]).unwrap().uniform_step(), None);
    }

    #[test]
    fn gaussians_are_reproducible_and_seed_dependent() {
        assert_eq!(generate_gaussians(100, 5), generate_gaussians(100, 5));
        assert_ne!(generate_gaussians(1, 5)[0], generate_gaussians(1, 6)[0]);
        assert_ne!(generate_gaussians_stream(1, 5, 0)[0], generate_gaussians_stream(1, 5, 1)[0]);
    }

    #[test]
    fn gaussian_mean_is_within_clt_band() {
        let n = 1_000_000;
        let g = generate_gaussians(n, 42);
        let m = g.iter().sum::<f64>() / n as f64;
        assert!(m.abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn one_euler_step_matches_hand_value() {
        let params = SfbmParams::from_nu2(0.1, 0.25, 100.0, 1).unwrap();
        let grid = TimeGrid::new(vec![0.0, 0.001]).unwrap();
        let vol = VolatilitySpec::affine(0.3, 0.1);
        // The first node is driven by K(t₁ − t₀) = K(0.001) = 0.1125.
        let path = euler_simulate(&params, &vol, &grid, 0.0, &[1.0]).unwrap();
        let expect = 0.1125 * 0.3 * 0.001f64.sqrt();
        assert!((path.values[1] - expect).abs() < 1e-15, "{}", path.values[1]);
        assert!((path.values[1] - 1.0673e-3).abs() < 1e-7);
    }

    #[test]
    fn zero_volatility_or_kernel_gives_constant_path() {
        let grid = TimeGrid::uniform(20, 1.0).unwrap();
        let g = generate_gaussians(20, 1);
        let p = euler_simulate(&ConstantKernel(1.0), &VolatilitySpec::affine(0.0, 0.3), &grid, 0.7, &g).unwrap();
        assert!(p.values.iter().all(|v| *v == 0.7));
        let p = euler_simulate(&ConstantKernel(0.0), &VolatilitySpec::affine(0.3, 0.1), &grid, 0.7, &g).unwrap();
        assert!(p.values.iter().all(|v| *v == 0.7));
        let fs = FeatureSet::new(1, vec![0.3, 1.0], 1.0, 0).unwrap();
        let p = rff_euler_simulate(&fs, &VolatilitySpec::affine(0.0, 0.1), &grid, -1.0, &g).unwrap();
        assert!(p.values.iter().all(|v| *v == -1.0));
    }

    #[test]
    fn zero_frequencies_reduce_to_constant_kernel() {
        let grid = TimeGrid::uniform(300, 1.0).unwrap();
        let g = generate_gaussians(300, 9);
        let vol = VolatilitySpec::affine(0.3, 0.1);
        let fs = FeatureSet::new(1, vec![0.0; 7], 1.3, 0).unwrap();
        let a = rff_euler_simulate(&fs, &vol, &grid, 0.2, &g).unwrap();
        let b = euler_simulate(&ConstantKernel(1.3), &vol, &grid, 0.2, &g).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn rff_scheme_equals_euler_with_estimated_kernel() {
        let nonuniform = TimeGrid::new((0..=200).map(|i| (i as f64 / 200.0).powi(2)).collect()).unwrap();
        for grid in [TimeGrid::uniform(1500, 1.0).unwrap(), nonuniform] {
            let g = generate_gaussians(grid.steps(), 4);
            let vol = VolatilitySpec::affine(0.3, 0.1);
            let mut eta: Vec<f64> = generate_gaussians(37, 8).iter().map(|v| 30.0 * v).collect();
            eta.extend([3.1e9, -8.4e14, 2.2e19, 5.5e26]);
            let fs = FeatureSet::new(1, eta, 0.8, 0).unwrap();
            let a = rff_euler_simulate(&fs, &vol, &grid, 0.1, &g).unwrap();
            let b = euler_simulate(&fs, &vol, &grid, 0.1, &g).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() <= 1e-9 * y.abs().max(1e-3), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn simd_and_scalar_passes_agree() {
        let mut blocks = vec![RotatingBlock::default(); 5];
        for (j, b) in blocks.iter_mut().enumerate() {
            for l in (0..LANES).filter(|l| j * LANES + l < 37) {
                let (s, c) = (0.37 * (j * LANES + l) as f64).sin_cos();
                b.rot_c[l] = c;
                b.rot_s[l] = s;
            }
        }
        let mut fast = blocks.clone();
        let g = generate_gaussians(200, 2);
        for a in g.chunks_exact(CHUNK) {
            let a: [f64; CHUNK] = a.try_into().unwrap();
            let x = advance(&mut blocks, &a, false);
            let y = advance(&mut fast, &a, simd_available());
            for (x, y) in x.iter().zip(&y) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
            }
        }
        let padding = &fast[4];
        assert!(padding.re[5..].iter().chain(&padding.im[5..]).all(|v| *v == 0.0));
    }

    #[test]
    fn fused_pass_matches_single_steps() {
        let mut blocks = vec![RotatingBlock::default(); 2];
        for (j, b) in blocks.iter_mut().enumerate() {
            for l in 0..LANES {
                let (s, c) = (1.3 * (j * LANES + l) as f64 + 0.1).sin_cos();
                b.rot_c[l] = c;
                b.rot_s[l] = s;
            }
        }
        let mut single = blocks.clone();
        let a = [0.3, -1.2, 0.7, 2.0];
        let ahead = advance_blocks(&mut blocks, &a);
        for &ai in &a {
            rotate_blocks(&mut single, ai);
        }
        for (j, expected) in ahead.iter().enumerate() {
            let mut probe = single.clone();
            let mut got = 0.0;
            for _ in 0..=j {
                got = rotate_blocks(&mut probe, 0.0);
            }
            assert!((got - expected).abs() < 1e-12, "S_{} {got} vs {expected}", j + 1);
        }
        for (p, q) in blocks.iter().zip(&single) {
            for l in 0..LANES {
                assert!((p.re[l] - q.re[l]).abs() < 1e-13 && (p.im[l] - q.im[l]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn brownian_covariance_from_unit_kernel() {
        let grid = TimeGrid::uniform(4, 1.0).unwrap();
        let cov = gaussian_volterra_covariance(&ConstantKernel(1.0), &|_| 1.0, &grid);
        let t = grid.times();
        for a in 0..4 {
            for b in 0..4 {
                assert!((cov[a][b] - t[a + 1].min(t[b + 1])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_node_covariance_by_hand() {
        let grid = TimeGrid::new(vec![0.0, 0.4, 1.0]).unwrap();
        let k = FnKernel(|u: f64| (-u).exp());
        let sigma = |u: f64| 1.0 + u;
        let cov = gaussian_volterra_covariance(&k, &sigma, &grid);
        let kk = |x: f64| (-x).exp();
        let c11 = 0.5 * 0.4 * (kk(0.4) * kk(0.4) * 1.0 + kk(0.0) * kk(0.0) * 1.4f64.powi(2));
        let c21 = 0.5 * 0.4 * (kk(1.0) * kk(0.4) * 1.0 + kk(0.6) * kk(0.0) * 1.4f64.powi(2));
        let c22 = 0.5 * 0.4 * kk(1.0).powi(2)
            + 0.5 * (0.4 + 0.6) * kk(0.6).powi(2) * 1.4f64.powi(2)
            + 0.5 * 0.6 * kk(0.0).powi(2) * 4.0;
        assert!((cov[0][0] - c11).abs() < 1e-15);
        assert!((cov[1][0] - c21).abs() < 1e-15 && cov[0][1] == cov[1][0]);
        assert!((cov[1][1] - c22).abs() < 1e-15);
    }

    #[test]
    fn zero_volatility_cholesky_path_is_the_mean() {
        let grid = TimeGrid::uniform(10, 1.0).unwrap();
        let g = generate_gaussians(10, 2);
        let k = ConstantKernel(2.0);
        let p = cholesky_gaussian_simulate(&k, &|_| 1.0, &|_| 0.0, &grid, 0.5, &g).unwrap();
        let mean = gaussian_volterra_mean(&k, &|_| 1.0, &grid, 0.5);
        for (i, v) in p.values.iter().enumerate() {
            assert!((v - mean[i]).abs() < 1e-5, "{v} vs {}", mean[i]);
            assert!((mean[i] - (0.5 + 2.0 * grid.times()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn brownian_sample_covariance() {
        let grid = TimeGrid::uniform(4, 1.0).unwrap();
        let k = ConstantKernel(1.0);
        let cov = gaussian_volterra_covariance(&k, &|_| 1.0, &grid);
        let (l, _) = cholesky_with_jitter(&cov).unwrap();
        let mean = gaussian_volterra_mean(&k, &|_| 0.0, &grid, 0.0);
        let n = 10_000;
        let mut s = 0.0;
        for i in 0..n {
            let g = generate_gaussians_stream(4, 77, i);
            let p = path_from_factor(&l, &mean, &grid, &g);
            s += p.values[2] * p.values[4];
        }
        let c = s / n as f64;
        assert!((c - 0.5).abs() < 0.05 * 0.5, "{c}");
    }

    #[test]
    fn factorization_failure_names_the_minor() {
        let bad = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 1.0]];
        match cholesky_with_jitter(&bad) {
            Err(Error::Factorization { leading_minor, .. }) => assert_eq!(leading_minor, 3),
            other => panic!("unexpected {other:?}"),
        }
        let singular = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let (_, jitter) = cholesky_with_jitter(&singular).unwrap();
        assert!(jitter > 0.0);
    }

    #[test]
    fn short_gaussian_vector_is_rejected() {
        let grid = TimeGrid::uniform(5, 1.0).unwrap();
        assert!(euler_simulate(&ConstantKernel(1.0), &VolatilitySpec::affine(1.0, 0.0), &grid, 0.0, &[0.0; 4]).is_err());
    }
}
