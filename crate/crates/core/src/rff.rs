//! Random Fourier features: `K̂_M(u) = K(0)/M · Σ cos(η_mᵀu)`.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernel::{Kernel, SfbmParams};

/// `a·b = p + e` exactly.
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// `a − b = d + e` exactly.
fn two_diff(a: f64, b: f64) -> (f64, f64) {
    let d = a - b;
    let bb = a - d;
    (d, (a - (d + bb)) + (bb - b))
}

/// `(sin, cos)` of a small-to-huge angle, with the fast branch exact to rounding.
fn sin_cos(x: f64) -> (f64, f64) {
    if x.abs() < 1e-5 {
        (x, 1.0 - 0.5 * x * x)
    } else {
        x.sin_cos()
    }
}

/// `e^{iθ}` as `(sin θ, cos θ)` for `θ` given as an unevaluated sum. Each part is reduced by
/// libm at full precision, so the result is accurate for the exact real sum even when a
/// rounded `θ` would have lost every digit of its phase.
fn phasor(parts: &[f64]) -> (f64, f64) {
    parts.iter().fold((0.0, 1.0), |(s, c), &x| {
        let (sx, cx) = sin_cos(x);
        (s * cx + c * sx, c * cx - s * sx)
    })
}

/// `(sin, cos)` of the exact product `η·t`.
pub(crate) fn phase(eta: f64, t: f64) -> (f64, f64) {
    let (p, e) = two_prod(eta, t);
    phasor(&[p, e])
}

/// `(sin, cos)` of the exact `η·j·h`.
pub(crate) fn phase_steps(eta: f64, j: usize, h: f64) -> (f64, f64) {
    let (p, e) = two_prod(eta, h);
    let (q, f) = two_prod(j as f64, p);
    let (r, g) = two_prod(j as f64, e);
    phasor(&[q, f, r, g])
}

/// `(sin, cos)` of the exact `η·(t − s)`.
pub(crate) fn phase_between(eta: f64, t: f64, s: f64) -> (f64, f64) {
    let (d, de) = two_diff(t, s);
    let (p, e) = two_prod(eta, d);
    let (q, f) = two_prod(eta, de);
    phasor(&[p, e, q, f])
}

/// `e^{iηᵀu}` with every component product taken exactly.
fn phase_dot(eta: &[f64], u: &[f64]) -> (f64, f64) {
    eta.iter().zip(u).fold((0.0, 1.0), |(s, c), (&e, &x)| {
        let (sx, cx) = phase(e, x);
        (s * cx + c * sx, c * cx - s * sx)
    })
}

/// `M` frequency vectors in R^d with the kernel value `K(0)` they reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    d: usize,
    /// Row-major `M × d`.
    frequencies: Vec<f64>,
    k0: f64,
    params: Option<SfbmParams>,
    params_fingerprint: String,
    seed: u64,
}

/// Short hex digest of the canonical parameter string.
pub fn params_fingerprint(params: &SfbmParams) -> String {
    let canon = format!("d={};H={};lambda2={};T={}", params.d, params.h, params.lambda2, params.t);
    let digest = Sha256::digest(canon.as_bytes());
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        let _ = write!(out, "{b:02x}");
    }
    out
}

impl FeatureSet {
    /// Feature set for an arbitrary kernel with value `k0` at the origin.
    pub fn new(d: usize, frequencies: Vec<f64>, k0: f64, seed: u64) -> Result<Self> {
        let fs = FeatureSet { d, frequencies, k0, params: None, params_fingerprint: String::new(), seed };
        fs.validate()?;
        Ok(fs)
    }

    /// Feature set drawn from the S-fBM spectral density of `params`.
    pub fn for_sfbm(params: &SfbmParams, frequencies: Vec<f64>, seed: u64) -> Result<Self> {
        let fs = FeatureSet {
            d: params.d,
            frequencies,
            k0: params.k0(),
            params: Some(*params),
            params_fingerprint: params_fingerprint(params),
            seed,
        };
        fs.validate()?;
        Ok(fs)
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("feature dimension must be at least 1".into()));
        }
        if self.frequencies.is_empty() || self.frequencies.len() % self.d != 0 {
            return Err(Error::Config(format!(
                "need a positive multiple of d={} frequency entries, got {}",
                self.d,
                self.frequencies.len()
            )));
        }
        if self.frequencies.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("frequencies must be finite".into()));
        }
        if !(self.k0 > 0.0 && self.k0.is_finite()) {
            return Err(Error::Config(format!("k0 must be positive, got {}", self.k0)));
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.d
    }

    /// Number of features `M`.
    pub fn len(&self) -> usize {
        self.frequencies.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn k0(&self) -> f64 {
        self.k0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> Option<&SfbmParams> {
        self.params.as_ref()
    }

    pub fn params_fingerprint(&self) -> &str {
        &self.params_fingerprint
    }

    pub fn frequency(&self, m: usize) -> &[f64] {
        &self.frequencies[m * self.d..(m + 1) * self.d]
    }

    /// All frequencies, row-major.
    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    /// The first `m` features as a new set.
    pub fn truncated(&self, m: usize) -> Result<FeatureSet> {
        let mut out = self.clone();
        out.frequencies.truncate(m * self.d);
        out.validate()?;
        Ok(out)
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, got });
        }
        Ok(())
    }

    /// `K̂_M(u) = (k0/M) Σ cos(η_mᵀu)`.
    pub fn kernel_estimate(&self, u: &[f64]) -> Result<f64> {
        self.check_dim(u.len())?;
        let sum: f64 = self
            .frequencies
            .chunks_exact(self.d)
            .map(|eta| phase_dot(eta, u).1)
            .sum();
        Ok(self.k0 * sum / self.len() as f64)
    }

    /// [`kernel_estimate`](Self::kernel_estimate) at a scalar lag; requires `d = 1`.
    pub fn kernel_estimate_scalar(&self, u: f64) -> Result<f64> {
        self.kernel_estimate(&[u])
    }

    /// `√(k0/M) · [cos(η₁ᵀx) … cos(η_Mᵀx), sin(η₁ᵀx) … sin(η_Mᵀx)]`.
    pub fn feature_map(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let m = self.len();
        let scale = (self.k0 / m as f64).sqrt();
        let mut out = vec![0.0; 2 * m];
        for (i, eta) in self.frequencies.chunks_exact(self.d).enumerate() {
            let (s, c) = phase_dot(eta, x);
            out[i] = scale * c;
            out[m + i] = scale * s;
        }
        Ok(out)
    }

    /// Writes the CSV file: header comments, then one frequency vector per row.
    /// Extra lines are emitted as additional `# ` comments.
    pub fn write_to<W: Write>(&self, mut w: W, extra_header: &[String]) -> Result<()> {
        match &self.params {
            Some(p) => writeln!(
                w,
                "# sfbm d={} H={} lambda2={} T={} seed={} M={}",
                p.d,
                p.h,
                p.lambda2,
                p.t,
                self.seed,
                self.len()
            )?,
            None => writeln!(w, "# features d={} seed={} M={}", self.d, self.seed, self.len())?,
        }
        writeln!(w, "# k0={}", self.k0)?;
        if !self.params_fingerprint.is_empty() {
            writeln!(w, "# fingerprint={}", self.params_fingerprint)?;
        }
        for line in extra_header {
            writeln!(w, "# {line}")?;
        }
        let mut row = String::new();
        for eta in self.frequencies.chunks_exact(self.d) {
            row.clear();
            for (j, v) in eta.iter().enumerate() {
                if j > 0 {
                    row.push(',');
                }
                let _ = write!(row, "{v}");
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, extra_header: &[String]) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w, extra_header)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<FeatureSet> {
        let mut d: Option<usize> = None;
        let mut seed = 0u64;
        let mut declared_m: Option<usize> = None;
        let mut k0: Option<f64> = None;
        let mut h = None;
        let mut lambda2 = None;
        let mut t = None;
        let mut is_sfbm = false;
        let mut freqs = Vec::new();
        for (lineno, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let mut words = comment.split_whitespace().peekable();
                if let Some(&kind) = words.peek() {
                    if kind == "sfbm" || kind == "features" {
                        is_sfbm = kind == "sfbm";
                        words.next();
                    }
                }
                for word in words {
                    let Some((key, value)) = word.split_once('=') else { continue };
                    let bad = || Error::Parse(format!("line {}: bad value for {key}: {value}", lineno + 1));
                    match key {
                        "d" => d = Some(value.parse().map_err(|_| bad())?),
                        "H" => h = Some(value.parse::<f64>().map_err(|_| bad())?),
                        "lambda2" => lambda2 = Some(value.parse::<f64>().map_err(|_| bad())?),
                        "T" => t = Some(value.parse::<f64>().map_err(|_| bad())?),
                        "seed" => seed = value.parse().map_err(|_| bad())?,
                        "M" => declared_m = Some(value.parse().map_err(|_| bad())?),
                        "k0" => k0 = Some(value.parse::<f64>().map_err(|_| bad())?),
                        _ => {}
                    }
                }
                continue;
            }
            let before = freqs.len();
            for field in line.split(',') {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("line {}: not a number: {field}", lineno + 1)))?;
                freqs.push(v);
            }
            let width = freqs.len() - before;
            match d {
                Some(dd) if dd != width => {
                    return Err(Error::Parse(format!("line {}: expected {dd} fields, got {width}", lineno + 1)))
                }
                None => d = Some(width),
                _ => {}
            }
        }
        let d = d.ok_or_else(|| Error::Parse("empty feature file".into()))?;
        if let Some(m) = declared_m {
            if m * d != freqs.len() {
                return Err(Error::Parse(format!("header declares M={m} but file has {} rows", freqs.len() / d)));
            }
        }
        if is_sfbm {
            let missing = |k: &str| Error::Parse(format!("sfbm header lacks {k}"));
            let params = SfbmParams::new(
                h.ok_or_else(|| missing("H"))?,
                lambda2.ok_or_else(|| missing("lambda2"))?,
                t.ok_or_else(|| missing("T"))?,
                d,
            )?;
            FeatureSet::for_sfbm(&params, freqs, seed)
        } else {
            let k0 = k0.ok_or_else(|| Error::Parse("feature header lacks k0".into()))?;
            FeatureSet::new(d, freqs, k0, seed)
        }
    }

    pub fn load(path: &Path) -> Result<FeatureSet> {
        FeatureSet::read_from(std::fs::File::open(path)?)
    }
}

impl FeatureSet {
    fn mean_cos(&self, cos: impl Fn(f64) -> f64) -> f64 {
        let sum: f64 = self.frequencies.chunks_exact(self.d).map(|eta| cos(eta[0])).sum();
        self.k0 * sum / self.len() as f64
    }
}

/// Scalar-lag view of a one-dimensional feature set (for `d > 1`, lags along the first axis).
impl Kernel for FeatureSet {
    fn eval(&self, lag: f64) -> f64 {
        self.mean_cos(|eta| phase(eta, lag).1)
    }

    fn eval_steps(&self, j: usize, h: f64) -> f64 {
        self.mean_cos(|eta| phase_steps(eta, j, h).1)
    }

    fn eval_between(&self, t: f64, s: f64) -> f64 {
        self.mean_cos(|eta| phase_between(eta, t, s).1)
    }

    fn k_at_zero(&self) -> f64 {
        self.k0
    }
}

/// Lags at which a kernel approximation is compared with the exact kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LagGrid {
    /// Scalar lags (one-dimensional features).
    Line(Vec<f64>),
    /// The tensor mesh `axis × axis` (two-dimensional features).
    Mesh2d(Vec<f64>),
}

impl LagGrid {
    /// `n` equispaced lags on `[0, upper]`.
    pub fn uniform(upper: f64, n: usize) -> LagGrid {
        LagGrid::Line(uniform_points(upper, n))
    }

    /// `n × n` mesh over `[−upper, upper]²`.
    pub fn mesh(upper: f64, n: usize) -> LagGrid {
        let axis = uniform_points(2.0 * upper, n).into_iter().map(|v| v - upper).collect();
        LagGrid::Mesh2d(axis)
    }

    fn points(&self) -> Vec<Vec<f64>> {
        match self {
            LagGrid::Line(lags) => lags.iter().map(|&u| vec![u]).collect(),
            LagGrid::Mesh2d(axis) => {
                axis.iter().flat_map(|&a| axis.iter().map(move |&b| vec![a, b])).collect()
            }
        }
    }
}

fn uniform_points(upper: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0];
    }
    (0..n).map(|i| upper * i as f64 / (n - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelErrorReport {
    pub points: Vec<Vec<f64>>,
    pub estimate: Vec<f64>,
    pub exact: Vec<f64>,
    pub abs_error: Vec<f64>,
    pub sup_error: f64,
    pub rms_error: f64,
    /// `(rows, cols)` of the error surface for a mesh grid.
    pub surface_shape: Option<(usize, usize)>,
}

/// `|K̂_M − K|` over the grid, with sup and RMS summaries.
pub fn kernel_error_report(features: &FeatureSet, params: &SfbmParams, grid: &LagGrid) -> Result<KernelErrorReport> {
    let points = grid.points();
    let estimate: Vec<f64> =
        points.par_iter().map(|u| features.kernel_estimate(u)).collect::<Result<Vec<f64>>>()?;
    let exact: Vec<f64> =
        points.iter().map(|u| params.eval(u.iter().map(|v| v * v).sum::<f64>().sqrt())).collect();
    let abs_error: Vec<f64> = estimate.iter().zip(&exact).map(|(a, b)| (a - b).abs()).collect();
    let sup_error = abs_error.iter().cloned().fold(0.0, f64::max);
    let rms_error = (abs_error.iter().map(|e| e * e).sum::<f64>() / abs_error.len() as f64).sqrt();
    let surface_shape = match grid {
        LagGrid::Line(_) => None,
        LagGrid::Mesh2d(axis) => Some((axis.len(), axis.len())),
    };
    Ok(KernelErrorReport { points, estimate, exact, abs_error, sup_error, rms_error, surface_shape })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> FeatureSet {
        let params = SfbmParams::from_nu2(0.1, 50.0, 100.0, 1).unwrap();
        FeatureSet::for_sfbm(&params, vec![0.013, -0.2, 1e-5, 3.7, 0.1 + 0.2], 7).unwrap()
    }

    /// Veltkamp split into two halves of at most 26 significant bits.
    fn split(x: f64) -> (f64, f64) {
        let c = 134217729.0 * x;
        let hi = c - (c - x);
        (hi, x - hi)
    }

    /// `e^{iab}` from the four half-products, each exact in f64.
    fn split_phase(a: f64, b: f64) -> (f64, f64) {
        let ((a1, a2), (b1, b2)) = (split(a), split(b));
        [a1 * b1, a1 * b2, a2 * b1, a2 * b2].iter().fold((0.0, 1.0), |(s, c), x| {
            let (sx, cx) = x.sin_cos();
            (s * cx + c * sx, c * cx - s * sx)
        })
    }

    #[test]
    fn phases_of_huge_products_match_split_products() {
        for (eta, t) in [(1.2345678901234567e19, 0.123456789), (-7.7e25, 0.9137), (3.3e9, 1.7), (0.25, 0.5)] {
            let (s, c) = phase(eta, t);
            let (s2, c2) = split_phase(eta, t);
            assert!((s - s2).abs() < 1e-12 && (c - c2).abs() < 1e-12, "{eta} {t}: ({s}, {c}) vs ({s2}, {c2})");
        }
    }

    #[test]
    fn lag_phases_compose() {
        let eta = 4.1234567e17;
        let (t, s) = (0.7310000000000001, 0.21999999999999997);
        let ((st, ct), (ss, cs)) = (phase(eta, t), phase(eta, s));
        let (sd, cd) = phase_between(eta, t, s);
        assert!((cd - (ct * cs + st * ss)).abs() < 1e-12 && (sd - (st * cs - ct * ss)).abs() < 1e-12);
        let h = 0.001;
        let (mut sr, mut cr) = (0.0, 1.0);
        let (s1, c1) = phase(eta, h);
        for j in 1..=400 {
            (sr, cr) = (sr * c1 + cr * s1, cr * c1 - sr * s1);
            let (sj, cj) = phase_steps(eta, j, h);
            assert!((sj - sr).abs() < 1e-12 && (cj - cr).abs() < 1e-12, "j={j}");
        }
    }

    #[test]
    fn estimate_at_origin_is_k0() {
        let fs = sample_set();
        assert_eq!(fs.kernel_estimate_scalar(0.0).unwrap(), fs.k0());
    }

    #[test]
    fn zero_frequencies_give_constant_kernel() {
        let fs = FeatureSet::new(1, vec![0.0; 5], 2.5, 0).unwrap();
        for u in [0.0, 1.0, -7.5, 1e6] {
            assert_eq!(fs.kernel_estimate_scalar(u).unwrap(), 2.5);
        }
    }

    #[test]
    fn single_feature_at_pi() {
        let fs = FeatureSet::new(1, vec![std::f64::consts::PI], 3.0, 0).unwrap();
        assert!((fs.kernel_estimate_scalar(1.0).unwrap() + 3.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let fs = FeatureSet::new(2, vec![1.0, 2.0], 1.0, 0).unwrap();
        assert!(matches!(fs.kernel_estimate(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(fs.feature_map(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn feature_map_at_origin() {
        let fs = sample_set();
        let m = fs.len();
        let phi = fs.feature_map(&[0.0]).unwrap();
        let s = (fs.k0() / m as f64).sqrt();
        assert!(phi[..m].iter().all(|v| (*v - s).abs() < 1e-15));
        assert!(phi[m..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn invalid_sets_are_rejected() {
        assert!(FeatureSet::new(1, vec![], 1.0, 0).is_err());
        assert!(FeatureSet::new(1, vec![f64::NAN], 1.0, 0).is_err());
        assert!(FeatureSet::new(1, vec![1.0], 0.0, 0).is_err());
        assert!(FeatureSet::new(2, vec![1.0, 2.0, 3.0], 1.0, 0).is_err());
    }

    #[test]
    fn file_round_trip_is_exact() {
        let fs = sample_set();
        let mut buf = Vec::new();
        fs.write_to(&mut buf, &["note=1".to_string()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# sfbm d=1 H=0.1 lambda2="));
        assert!(text.lines().next().unwrap().ends_with("seed=7 M=5"));
        let back = FeatureSet::read_from(&buf[..]).unwrap();
        assert_eq!(back, fs);

        let custom = FeatureSet::new(2, vec![0.1, -0.3, 1.0 / 3.0, 2e-300], 1.25, 4).unwrap();
        let mut buf = Vec::new();
        custom.write_to(&mut buf, &[]).unwrap();
        assert_eq!(FeatureSet::read_from(&buf[..]).unwrap(), custom);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(FeatureSet::read_from("# sfbm d=1 H=0.1 lambda2=0.02 T=100 seed=1 M=2\n0.5\n".as_bytes()).is_err());
        assert!(FeatureSet::read_from("# features d=1 seed=1 M=1\n# k0=1\nabc\n".as_bytes()).is_err());
        assert!(FeatureSet::read_from("# features d=2 seed=1\n# k0=1\n0.5\n".as_bytes()).is_err());
        assert!(FeatureSet::read_from("".as_bytes()).is_err());
    }

    #[test]
    fn error_report_is_zero_at_origin() {
        let fs = sample_set();
        let params = *fs.params().unwrap();
        let rep = kernel_error_report(&fs, &params, &LagGrid::uniform(100.0, 11)).unwrap();
        assert_eq!(rep.abs_error[0], 0.0);
        assert_eq!(rep.points.len(), 11);
        assert!(rep.sup_error >= rep.rms_error);
    }

    #[test]
    fn mesh_report_has_surface() {
        let params = SfbmParams::from_nu2(0.1, 2.0, 40.0, 2).unwrap();
        let fs = FeatureSet::for_sfbm(&params, vec![0.01, 0.02, -0.05, 0.0], 1).unwrap();
        let rep = kernel_error_report(&fs, &params, &LagGrid::mesh(40.0, 5)).unwrap();
        assert_eq!(rep.surface_shape, Some((5, 5)));
        assert_eq!(rep.points.len(), 25);
        assert_eq!(rep.abs_error[12], 0.0);
    }

    #[test]
    fn fingerprint_depends_on_parameters() {
        let a = SfbmParams::new(0.1, 0.02, 100.0, 1).unwrap();
        let b = SfbmParams::new(0.1, 0.02, 200.0, 1).unwrap();
        assert_eq!(params_fingerprint(&a), params_fingerprint(&a));
        assert_ne!(params_fingerprint(&a), params_fingerprint(&b));
        assert_eq!(params_fingerprint(&a).len(), 16);
    }
}
