//! Command-line front end. [`run`] parses arguments, merges an optional JSON config,
//! dispatches the subcommand and maps failures to exit codes (1 for bad input, 2 for
//! numerical failure).

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use volterra_rff::analysis::{
    self, fmt_num, to_csv, Coupling, ExperimentConfig, Scheme, TestFunction, TimingConfig,
};
use volterra_rff::estimation::{default_lags, gmm_estimate, observed_cov_from_features, GmmConfig, GmmResult, TMode};
use volterra_rff::hmc::chain_diagnostics;
use volterra_rff::kernel::nu2_from_lambda2;
use volterra_rff::rff::{kernel_error_report, LagGrid};
use volterra_rff::sampling::{sample_features_hmc, sample_features_inverse_cdf, FeatureSampler, HmcSettings, Parameterization};
use volterra_rff::spectral::{fourier_quadrature_oracle, spectral_density, SpectralEvalConfig};
use volterra_rff::volterra::{
    cholesky_gaussian_simulate, derive_seed, euler_simulate, generate_gaussians_stream, rff_euler_simulate,
};
use volterra_rff::{stats, Error, FeatureSet, SfbmParams, SimPath, TimeGrid, VolatilitySpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "volterra-rff", version, about = "Random Fourier feature simulation of stochastic Volterra equations")]
struct Cli {
    /// JSON file whose keys are flag names of the chosen subcommand; flags given on
    /// the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed from which all randomness is derived.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: VOLTERRA_RFF_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tabulate the S-fBM spectral density against a direct Fourier quadrature.
    SpectralDensity(SpectralArgs),
    /// Draw feature frequencies from the spectral density.
    SampleFeatures(SampleArgs),
    /// Compare the feature kernel estimate with the exact kernel on a lag grid.
    KernelError(KernelErrorArgs),
    /// Simulate one path of the Volterra equation.
    Simulate(SimulateArgs),
    /// Recover (lambda2, H) from autocovariances by GMM.
    Estimate(EstimateArgs),
    /// Wall-time benchmark of the simulation schemes.
    Bench(BenchArgs),
    /// Weak and strong error of the RFF scheme against exact-kernel Euler.
    ErrorAnalysis(ErrorAnalysisArgs),
}

/// S-fBM parameters. Give `--lambda2` or `--nu2`; both must agree to 1e-10.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
struct ParamArgs {
    /// Hurst exponent in (0, 1/2).
    #[arg(long = "H")]
    #[serde(rename = "H", skip_serializing_if = "Option::is_none")]
    h: Option<f64>,
    /// Intermittency, or `auto` to derive it from --nu2.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda2: Option<Lambda2>,
    /// Variance scale: K(0) = nu2/2.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    nu2: Option<f64>,
    /// Correlation limit (support of the kernel).
    #[arg(long = "T")]
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    t: Option<f64>,
    /// Dimension of the lag variable.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    d: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Lambda2 {
    Value(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum AutoTag {
    Auto,
}

impl std::str::FromStr for Lambda2 {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(Lambda2::Auto(AutoTag::Auto));
        }
        s.parse::<f64>().map(Lambda2::Value).map_err(|e| format!("expected a number or `auto`: {e}"))
    }
}

impl ParamArgs {
    fn is_given(&self) -> bool {
        self.h.is_some() || self.t.is_some() || self.nu2.is_some() || matches!(self.lambda2, Some(Lambda2::Value(_)))
    }

    fn resolve(&self) -> Result<SfbmParams, CliError> {
        let h = self.h.ok_or_else(|| CliError::usage("--H is required"))?;
        let t = self.t.ok_or_else(|| CliError::usage("--T is required"))?;
        let d = self.d.unwrap_or(1);
        let lambda2 = match (self.lambda2, self.nu2) {
            (Some(Lambda2::Value(l2)), Some(nu2)) => {
                let implied = nu2_from_lambda2(h, l2)?;
                if (implied - nu2).abs() > 1e-10 * nu2.abs().max(1.0) {
                    return Err(CliError::usage(format!(
                        "--lambda2 {l2} implies nu2 = {implied}, inconsistent with --nu2 {nu2}"
                    )));
                }
                l2
            }
            (Some(Lambda2::Value(l2)), None) => l2,
            (_, Some(nu2)) => return Ok(SfbmParams::from_nu2(h, nu2, t, d)?),
            (_, None) => return Err(CliError::usage("one of --lambda2 or --nu2 is required")),
        };
        Ok(SfbmParams::new(h, lambda2, t, d)?)
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpectralArgs {
    #[command(flatten)]
    #[serde(flatten)]
    params: ParamArgs,
    /// Largest radius r of the table.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    rmax: Option<f64>,
    /// Number of equispaced radii in [0, rmax] (default 201).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    points: Option<usize>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum Method {
    Hmc,
    InverseCdf,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
struct SamplerArgs {
    /// Sampling method.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    method: Option<Method>,
    /// HMC step size in sampler coordinates.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    /// HMC leapfrog steps per proposal.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    leapfrog_steps: Option<usize>,
    /// HMC burn-in iterations.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    burn_in: Option<usize>,
    /// Keep every `thin`-th HMC state.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    thin: Option<usize>,
    /// Adapt the HMC step size during burn-in (true/false).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tune: Option<bool>,
    /// Sample the asinh-radial transform (default) or the frequencies directly.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    parameterization: Option<ParamChoice>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum ParamChoice {
    AsinhRadial,
    Direct,
}

impl SamplerArgs {
    fn hmc_settings(&self) -> HmcSettings {
        let mut s = HmcSettings::default();
        if let Some(v) = self.epsilon {
            s.epsilon = v;
        }
        if let Some(v) = self.leapfrog_steps {
            s.leapfrog_steps = v;
        }
        if let Some(v) = self.burn_in {
            s.burn_in = v;
        }
        if let Some(v) = self.thin {
            s.thin = v;
        }
        if let Some(v) = self.tune {
            s.tune = v;
        }
        if let Some(p) = self.parameterization {
            s.parameterization = match p {
                ParamChoice::AsinhRadial => Parameterization::AsinhRadial,
                ParamChoice::Direct => Parameterization::Direct,
            };
        }
        s
    }

    fn sampler(&self) -> FeatureSampler {
        match self.method.unwrap_or(Method::Hmc) {
            Method::Hmc => FeatureSampler::Hmc(self.hmc_settings()),
            Method::InverseCdf => FeatureSampler::InverseCdf,
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleArgs {
    #[command(flatten)]
    #[serde(flatten)]
    params: ParamArgs,
    #[command(flatten)]
    #[serde(flatten)]
    sampler: SamplerArgs,
    /// Number of features.
    #[arg(long = "M")]
    #[serde(rename = "M", skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    /// Output feature file.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Diagnostics JSON (default: <out>.diagnostics.json).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostics: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelErrorArgs {
    /// Feature file; its S-fBM parameters are used unless overridden.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    params: ParamArgs,
    /// Largest lag (default T).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    upper: Option<f64>,
    /// Grid points per axis (default 1001 in d=1, 50 in d=2).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    points: Option<usize>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum SimScheme {
    Euler,
    Rff,
    Cholesky,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateArgs {
    /// `euler` (exact kernel), `rff` (needs --features) or `cholesky` (needs --beta 0).
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    scheme: Option<SimScheme>,
    /// Feature file for the rff scheme.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    params: ParamArgs,
    /// Number of time steps.
    #[arg(long = "N")]
    #[serde(rename = "N", skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    /// Horizon of the path.
    #[arg(long = "Tf")]
    #[serde(rename = "Tf", skip_serializing_if = "Option::is_none")]
    tf: Option<f64>,
    /// sigma(t, x) = sigma0 (1 + beta x).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma0: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    /// Initial value.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    x0: Option<f64>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateArgs {
    /// Feature file whose kernel estimate supplies the observed autocovariances.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<PathBuf>,
    /// CSV of (lag, covariance) pairs instead of a feature file.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    cov: Option<PathBuf>,
    /// Run this many trials, each on freshly sampled features (needs the parameter flags and --M).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    trials: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    params: ParamArgs,
    #[command(flatten)]
    #[serde(flatten)]
    sampler: SamplerArgs,
    /// Features per trial.
    #[arg(long = "M")]
    #[serde(rename = "M", skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    /// Lags are the distinct values of floor(2^(k/2)), k = 0..=q (default 19).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    q: Option<usize>,
    /// Hold T fixed at this value (default: T of the features or --T).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    fix_t: Option<f64>,
    /// Estimate T as well, within `lower,upper`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    #[serde(skip_serializing_if = "Option::is_none")]
    free_t: Option<Vec<f64>>,
    /// Output (JSON for a single estimate, CSV in trials mode; default: stdout).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchArgs {
    /// Load the reference setup (H=0.1, nu2=1, T=200, M=8000, N up to 16000, 20 runs).
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    preset: Option<Preset>,
    #[command(flatten)]
    #[serde(flatten)]
    params: ParamArgs,
    #[command(flatten)]
    #[serde(flatten)]
    sampler: SamplerArgs,
    /// Step counts, comma separated.
    #[arg(long = "Ns", value_delimiter = ',')]
    #[serde(rename = "Ns", skip_serializing_if = "Option::is_none")]
    ns: Option<Vec<usize>>,
    #[arg(long = "M")]
    #[serde(rename = "M", skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    /// Timed repetitions per cell (at least 3).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    runs: Option<usize>,
    /// Schemes to time, comma separated.
    #[arg(long, value_delimiter = ',', value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    schemes: Option<Vec<BenchScheme>>,
    #[arg(long = "Tf")]
    #[serde(rename = "Tf", skip_serializing_if = "Option::is_none")]
    tf: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma0: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum Preset {
    #[value(alias = "paper")]
    #[serde(alias = "paper")]
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
enum BenchScheme {
    Euler,
    RffWithSampling,
    RffPrecomputed,
}

impl From<BenchScheme> for Scheme {
    fn from(s: BenchScheme) -> Scheme {
        match s {
            BenchScheme::Euler => Scheme::Euler,
            BenchScheme::RffWithSampling => Scheme::RffWithSampling,
            BenchScheme::RffPrecomputed => Scheme::RffPrecomputed,
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ErrorAnalysisArgs {
    /// Load the reference setup (H in {0.05, 0.1}, nu2=1, T=200, N=1000, 100 paths).
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    preset: Option<Preset>,
    /// Hurst exponents, comma separated.
    #[arg(long = "H", value_delimiter = ',')]
    #[serde(rename = "H", skip_serializing_if = "Option::is_none")]
    hs: Option<Vec<f64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    nu2: Option<f64>,
    #[arg(long = "T")]
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    t: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    sampler: SamplerArgs,
    /// Feature counts, comma separated and increasing.
    #[arg(long = "Ms", value_delimiter = ',')]
    #[serde(rename = "Ms", skip_serializing_if = "Option::is_none")]
    ms: Option<Vec<usize>>,
    #[arg(long = "N")]
    #[serde(rename = "N", skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[arg(long = "Tf")]
    #[serde(rename = "Tf", skip_serializing_if = "Option::is_none")]
    tf: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    paths: Option<usize>,
    /// Strong error moments, comma separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    p: Option<Vec<f64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma0: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    bootstrap: Option<usize>,
    /// Directory receiving weak_error.csv and strong_error.csv.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: msg.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_CONFIG };
        CliError { code, message: e.to_string() }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::usage(format!("i/o error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::usage(format!("config error: {e}"))
    }
}

type CliResult<T> = Result<T, CliError>;

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

/// Global settings after merging the config file.
struct Context {
    seed: u64,
    subcommand: &'static str,
    resolved: Value,
}

impl Context {
    fn header(&self) -> Vec<String> {
        vec![
            format!("volterra-rff {}", self.subcommand),
            format!("seed={}", self.seed),
            format!("config={}", serde_json::to_string(&self.resolved).unwrap_or_default()),
        ]
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
            match serde_json::from_str::<Value>(&text)? {
                Value::Object(m) => m,
                _ => return Err(CliError::usage("config must be a JSON object")),
            }
        }
        None => Map::new(),
    };
    let seed = match (cli.seed, config.remove("seed")) {
        (Some(s), _) => s,
        (None, Some(v)) => serde_json::from_value(v)?,
        (None, None) => 0,
    };
    let threads = match (cli.threads, config.remove("threads")) {
        (Some(t), _) => Some(t),
        (None, Some(v)) => Some(serde_json::from_value(v)?),
        (None, None) => std::env::var("VOLTERRA_RFF_THREADS").ok().and_then(|v| v.parse().ok()),
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        // Fails only if a pool already exists, in which case the existing one is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    macro_rules! go {
        ($args:expr, $name:literal, $f:ident) => {{
            let (args, resolved) = merge($args, config)?;
            let mut resolved = resolved;
            resolved.insert("seed".into(), json!(seed));
            $f(&args, &Context { seed, subcommand: $name, resolved: Value::Object(resolved) })
        }};
    }
    match cli.command {
        Command::SpectralDensity(a) => go!(a, "spectral-density", cmd_spectral),
        Command::SampleFeatures(a) => go!(a, "sample-features", cmd_sample),
        Command::KernelError(a) => go!(a, "kernel-error", cmd_kernel_error),
        Command::Simulate(a) => go!(a, "simulate", cmd_simulate),
        Command::Estimate(a) => go!(a, "estimate", cmd_estimate),
        Command::Bench(a) => go!(a, "bench", cmd_bench),
        Command::ErrorAnalysis(a) => go!(a, "error-analysis", cmd_error_analysis),
    }
}

/// Overlays the flags given on the command line onto the config object.
fn merge<T: Serialize + DeserializeOwned>(cli: T, mut config: Map<String, Value>) -> CliResult<(T, Map<String, Value>)> {
    if let Value::Object(given) = serde_json::to_value(&cli)? {
        for (k, v) in given {
            config.insert(k, v);
        }
    }
    let merged: T = serde_json::from_value(Value::Object(config.clone()))?;
    let canonical = match serde_json::to_value(&merged)? {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    Ok((merged, canonical))
}

fn write_output(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display()))),
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn comment_block(lines: &[String]) -> String {
    lines.iter().map(|l| format!("# {l}\n")).collect()
}

fn cmd_spectral(a: &SpectralArgs, ctx: &Context) -> CliResult<()> {
    let params = a.params.resolve()?;
    let rmax = a.rmax.ok_or_else(|| CliError::usage("--rmax is required"))?;
    if !(rmax > 0.0) {
        return Err(CliError::usage("--rmax must be positive"));
    }
    let n = a.points.unwrap_or(201);
    if n < 2 {
        return Err(CliError::usage("--points must be at least 2"));
    }
    let cfg = SpectralEvalConfig::default();
    let rows: Vec<(f64, f64, f64)> = {
        use rayon::prelude::*;
        (0..n)
            .into_par_iter()
            .map(|i| {
                let r = rmax * i as f64 / (n - 1) as f64;
                (r, spectral_density(&params, r, &cfg), fourier_quadrature_oracle(&params, r))
            })
            .collect()
    };
    let mut text = comment_block(&ctx.header());
    text.push_str("r,f,f_oracle,abs_err\n");
    for (r, f, o) in rows {
        text.push_str(&format!("{r},{},{},{}\n", fmt_num(f), fmt_num(o), fmt_num((f - o).abs())));
    }
    write_output(a.out.as_deref(), &text)
}

fn cmd_sample(a: &SampleArgs, ctx: &Context) -> CliResult<()> {
    let params = a.params.resolve()?;
    let m = a.m.ok_or_else(|| CliError::usage("--M is required"))?;
    let out = a.out.clone().ok_or_else(|| CliError::usage("--out is required"))?;
    let spectral = SpectralEvalConfig::default();
    let (features, diagnostics) = match a.sampler.method.unwrap_or(Method::Hmc) {
        Method::Hmc => {
            let (fs, chain) = sample_features_hmc(&params, m, &a.sampler.hmc_settings(), spectral, ctx.seed)?;
            let diag = chain_diagnostics(&chain, |s| s.iter().map(|v| v * v).sum::<f64>().sqrt());
            let v = json!({
                "method": "hmc",
                "acceptance_rate": chain.acceptance_rate,
                "burn_in_acceptance_rate": chain.burn_in_acceptance_rate,
                "ess": diag.ess,
                "rho_hat": diag.rho_hat,
                "tuned_epsilon": chain.tuned_epsilon,
                "divergences": chain.divergences,
                "degenerate": diag.degenerate,
                "test_function": "sampler-coordinate radius",
                "seed": ctx.seed,
            });
            (fs, v)
        }
        Method::InverseCdf => {
            let fs = sample_features_inverse_cdf(&params, m, spectral, ctx.seed)?;
            let v = json!({
                "method": "inverse-cdf",
                "acceptance_rate": 1.0,
                "ess": m as f64,
                "rho_hat": 0.0,
                "tuned_epsilon": Value::Null,
                "seed": ctx.seed,
            });
            (fs, v)
        }
    };
    let header = ctx.header()[..].iter().skip(1).cloned().collect::<Vec<_>>();
    let mut buf = Vec::new();
    features.write_to(&mut buf, &header)?;
    fs::write(&out, buf).map_err(|e| CliError::usage(format!("cannot write {}: {e}", out.display())))?;
    let diag_path = a.diagnostics.clone().unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".diagnostics.json");
        PathBuf::from(p)
    });
    let text = serde_json::to_string_pretty(&diagnostics)? + "\n";
    fs::write(&diag_path, text).map_err(|e| CliError::usage(format!("cannot write {}: {e}", diag_path.display())))?;
    Ok(())
}

/// Parameters for a feature file: the flags if any are given, otherwise its header.
fn params_for(features: &FeatureSet, flags: &ParamArgs) -> CliResult<SfbmParams> {
    if flags.is_given() {
        let p = flags.resolve()?;
        if p.d != features.dimension() {
            return Err(CliError::usage("parameter dimension differs from the feature file"));
        }
        return Ok(p);
    }
    features
        .params()
        .copied()
        .ok_or_else(|| CliError::usage("the feature file carries no S-fBM parameters; give --H, --T and --nu2/--lambda2"))
}

fn load_features(path: &Path) -> CliResult<FeatureSet> {
    FeatureSet::load(path).map_err(|e| CliError::usage(format!("cannot load features {}: {e}", path.display())))
}

fn cmd_kernel_error(a: &KernelErrorArgs, ctx: &Context) -> CliResult<()> {
    let path = a.features.as_ref().ok_or_else(|| CliError::usage("--features is required"))?;
    let features = load_features(path)?;
    let params = params_for(&features, &a.params)?;
    let upper = a.upper.unwrap_or(params.t);
    let grid = match params.d {
        1 => LagGrid::uniform(upper, a.points.unwrap_or(1001)),
        2 => LagGrid::mesh(upper, a.points.unwrap_or(50)),
        d => return Err(CliError::usage(format!("kernel-error supports d = 1 or 2, got {d}"))),
    };
    let rep = kernel_error_report(&features, &params, &grid)?;
    let mut lines = ctx.header();
    lines.push(format!("features={} M={}", path.display(), features.len()));
    lines.push(format!("sup_error={} rms_error={}", rep.sup_error, rep.rms_error));
    let mut text = comment_block(&lines);
    text.push_str(if params.d == 1 { "tau,estimate,exact,abs_err\n" } else { "tau1,tau2,estimate,exact,abs_err\n" });
    for i in 0..rep.points.len() {
        let pt: Vec<String> = rep.points[i].iter().map(|v| v.to_string()).collect();
        text.push_str(&format!(
            "{},{},{},{}\n",
            pt.join(","),
            fmt_num(rep.estimate[i]),
            fmt_num(rep.exact[i]),
            fmt_num(rep.abs_error[i])
        ));
    }
    write_output(a.out.as_deref(), &text)
}

fn cmd_simulate(a: &SimulateArgs, ctx: &Context) -> CliResult<()> {
    let scheme = a.scheme.unwrap_or(SimScheme::Rff);
    let n = a.n.ok_or_else(|| CliError::usage("--N is required"))?;
    let tf = a.tf.unwrap_or(1.0);
    let sigma0 = a.sigma0.unwrap_or(0.3);
    let beta = a.beta.unwrap_or(0.0);
    let x0 = a.x0.unwrap_or(0.0);
    let grid = TimeGrid::uniform(n, tf)?;
    let vol = VolatilitySpec::affine(sigma0, beta);
    let g = generate_gaussians_stream(n, derive_seed(ctx.seed, 2, 0), 0);
    let mut lines = ctx.header();
    let mut path: SimPath = match scheme {
        SimScheme::Rff => {
            let file = a.features.as_ref().ok_or_else(|| CliError::usage("--features is required for the rff scheme"))?;
            let features = load_features(file)?;
            lines.push(format!("features={} M={} fingerprint={}", file.display(), features.len(), features.params_fingerprint()));
            rff_euler_simulate(&features, &vol, &grid, x0, &g)?
        }
        SimScheme::Euler => {
            let params = match &a.features {
                Some(f) if !a.params.is_given() => params_for(&load_features(f)?, &a.params)?,
                _ => a.params.resolve()?,
            };
            euler_simulate(&params, &vol, &grid, x0, &g)?
        }
        SimScheme::Cholesky => {
            if beta != 0.0 {
                return Err(CliError::usage("the cholesky scheme needs a state-independent volatility (--beta 0)"));
            }
            let params = a.params.resolve()?;
            cholesky_gaussian_simulate(&params, &|_| 0.0, &|_| sigma0, &grid, x0, &g)?
        }
    };
    if let Some(i) = path.values.iter().position(|v| !v.is_finite()) {
        return Err(CliError {
            code: EXIT_NUMERICAL,
            message: format!("path became non-finite at t = {}", path.grid.times()[i]),
        });
    }
    path.seed = Some(ctx.seed);
    let mut text = comment_block(&lines);
    text.push_str("t,X\n");
    for (t, x) in path.grid.times().iter().zip(&path.values) {
        text.push_str(&format!("{t},{}\n", fmt_num(*x)));
    }
    write_output(a.out.as_deref(), &text)
}

fn read_cov_csv(path: &Path) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let (mut lags, mut cov) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 2 {
            return Err(CliError::usage(format!("{}:{}: expected lag,covariance", path.display(), i + 1)));
        }
        match (cells[0].parse::<f64>(), cells[1].parse::<f64>()) {
            (Ok(l), Ok(c)) => {
                lags.push(l);
                cov.push(c);
            }
            _ if lags.is_empty() => continue,
            _ => return Err(CliError::usage(format!("{}:{}: not a number", path.display(), i + 1))),
        }
    }
    if lags.is_empty() {
        return Err(CliError::usage(format!("{}: no covariance rows", path.display())));
    }
    Ok((lags, cov))
}

/// λ² = 2K(0)H(1−2H) ≤ K(0)/4, so the largest observed covariance caps λ² with room to spare.
fn widen_lambda2_bound(gmm: &mut GmmConfig, observed: &[f64]) {
    let cap = observed.iter().cloned().fold(0.0, f64::max);
    if cap.is_finite() && cap > gmm.lambda2_bounds.1 {
        gmm.lambda2_bounds.1 = cap;
    }
}

fn cmd_estimate(a: &EstimateArgs, ctx: &Context) -> CliResult<()> {
    let t_default = || -> Option<f64> { a.fix_t.or(a.params.t) };
    let t_mode = |fallback: Option<f64>| -> CliResult<TMode> {
        match (&a.free_t, a.fix_t.or(fallback)) {
            (Some(b), _) => {
                if b.len() != 2 {
                    return Err(CliError::usage("--free-t takes lower,upper"));
                }
                Ok(TMode::Free { lower: b[0], upper: b[1] })
            }
            (None, Some(t)) => Ok(TMode::Fixed(t)),
            (None, None) => Err(CliError::usage("give --fix-t, --free-t or --T")),
        }
    };
    let mut gmm = GmmConfig::default();
    gmm.optimizer.seed = derive_seed(ctx.seed, 5, 0);
    let q = a.q.unwrap_or(19);
    let lags_default = default_lags(q);

    if let Some(trials) = a.trials {
        if trials < 2 {
            return Err(CliError::usage("--trials must be at least 2"));
        }
        let params = a.params.resolve()?;
        let m = a.m.ok_or_else(|| CliError::usage("--M is required in trials mode"))?;
        let mode = t_mode(Some(params.t))?;
        let sampler = a.sampler.sampler();
        let results: Vec<GmmResult> = {
            use rayon::prelude::*;
            (0..trials as u64)
                .into_par_iter()
                .map(|i| -> CliResult<GmmResult> {
                    let fs = sampler.sample(&params, m, SpectralEvalConfig::default(), derive_seed(ctx.seed, 1, i))?;
                    let obs = observed_cov_from_features(&fs, &lags_default)?;
                    let mut gmm = gmm.clone();
                    widen_lambda2_bound(&mut gmm, &obs);
                    Ok(gmm_estimate(&obs, &lags_default, mode, &gmm)?)
                })
                .collect::<CliResult<_>>()?
        };
        let hs: Vec<f64> = results.iter().map(|r| r.h_hat).collect();
        let ls: Vec<f64> = results.iter().map(|r| r.lambda2_hat).collect();
        let mut lines = ctx.header();
        lines.push(format!(
            "summary H {:.4}({:.4}) lambda2 {:.4}({:.4})",
            stats::mean(&hs),
            stats::std_dev(&hs),
            stats::mean(&ls),
            stats::std_dev(&ls)
        ));
        let mut text = comment_block(&lines);
        text.push_str("trial,lambda2_hat,H_hat,T_hat,objective,converged\n");
        for (i, r) in results.iter().enumerate() {
            let t = r.t_hat.map(|v| v.to_string()).unwrap_or_default();
            text.push_str(&format!("{i},{},{},{t},{},{}\n", r.lambda2_hat, r.h_hat, r.objective_value, r.converged));
        }
        return write_output(a.out.as_deref(), &text);
    }

    let (lags, observed, fallback_t) = match (&a.features, &a.cov) {
        (Some(_), Some(_)) => return Err(CliError::usage("give either --features or --cov, not both")),
        (Some(path), None) => {
            let fs = load_features(path)?;
            let t = fs.params().map(|p| p.t).or_else(t_default);
            let obs = observed_cov_from_features(&fs, &lags_default)?;
            (lags_default.clone(), obs, t)
        }
        (None, Some(path)) => {
            let (l, c) = read_cov_csv(path)?;
            (l, c, t_default())
        }
        (None, None) => return Err(CliError::usage("give --features, --cov or --trials")),
    };
    widen_lambda2_bound(&mut gmm, &observed);
    let result = gmm_estimate(&observed, &lags, t_mode(fallback_t)?, &gmm)?;
    let out = json!({ "config": ctx.resolved, "seed": ctx.seed, "result": result });
    write_output(a.out.as_deref(), &(serde_json::to_string_pretty(&out)? + "\n"))
}

fn cmd_bench(a: &BenchArgs, ctx: &Context) -> CliResult<()> {
    let reference = a.preset == Some(Preset::Reference);
    let mut pa = a.params.clone();
    if reference {
        pa.h = pa.h.or(Some(0.1));
        pa.t = pa.t.or(Some(200.0));
        if pa.nu2.is_none() && pa.lambda2.is_none() {
            pa.nu2 = Some(1.0);
        }
    }
    let params = pa.resolve()?;
    let ns = a.ns.clone().or_else(|| reference.then(|| vec![1000, 2000, 4000, 8000, 16000]));
    let ns = ns.ok_or_else(|| CliError::usage("--Ns is required"))?;
    let m = a.m.or(reference.then_some(8000)).ok_or_else(|| CliError::usage("--M is required"))?;
    let schemes = a
        .schemes
        .clone()
        .map(|v| v.into_iter().map(Scheme::from).collect())
        .unwrap_or_else(|| vec![Scheme::Euler, Scheme::RffWithSampling, Scheme::RffPrecomputed]);
    let cfg = TimingConfig {
        params,
        vol: VolatilitySpec::affine(a.sigma0.unwrap_or(0.3), a.beta.unwrap_or(0.1)),
        horizon: a.tf.unwrap_or(1.0),
        ns,
        m,
        runs: a.runs.unwrap_or(if reference { 20 } else { 5 }),
        schemes,
        sampler: a.sampler.sampler(),
        seed: ctx.seed,
    };
    // Measured cells run single-threaded.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| CliError::usage(e.to_string()))?;
    let rows = pool.install(|| analysis::timing_benchmark(&cfg))?;
    let mut lines = ctx.header();
    lines.push("wall times vary between runs; all other columns are deterministic".into());
    write_output(a.out.as_deref(), &to_csv(&rows, &lines))
}

fn cmd_error_analysis(a: &ErrorAnalysisArgs, ctx: &Context) -> CliResult<()> {
    let reference = a.preset == Some(Preset::Reference);
    let hs = a.hs.clone().or_else(|| reference.then(|| vec![0.05, 0.1])).ok_or_else(|| CliError::usage("--H is required"))?;
    let out_dir = a.out_dir.clone().ok_or_else(|| CliError::usage("--out-dir is required"))?;
    let (mut weak, mut strong) = (Vec::new(), Vec::new());
    for &h in &hs {
        let mut cfg = ExperimentConfig::reference_preset(h, ctx.seed)?;
        cfg.params = SfbmParams::from_nu2(h, a.nu2.unwrap_or(1.0), a.t.unwrap_or(200.0), 1)?;
        if let Some(v) = &a.ms {
            cfg.ms = v.clone();
        }
        if let Some(v) = a.n {
            cfg.n_steps = v;
        }
        if let Some(v) = a.tf {
            cfg.horizon = v;
        }
        if let Some(v) = a.paths {
            cfg.n_paths = v;
        }
        if let Some(v) = &a.p {
            cfg.p_values = v.clone();
        }
        if let Some(v) = a.bootstrap {
            cfg.bootstrap_resamples = v;
        }
        cfg.vol = VolatilitySpec::affine(a.sigma0.unwrap_or(0.3), a.beta.unwrap_or(0.1));
        cfg.couplings = vec![Coupling::Common, Coupling::Independent];
        cfg.phis = vec![TestFunction::Square, TestFunction::GaussianBump];
        cfg.sampler = a.sampler.sampler();
        let tables = analysis::run_error_experiment(&cfg)?;
        weak.extend(tables.weak);
        strong.extend(tables.strong);
    }
    fs::create_dir_all(&out_dir)?;
    let lines = ctx.header();
    fs::write(out_dir.join("weak_error.csv"), to_csv(&weak, &lines))?;
    fs::write(out_dir.join("strong_error.csv"), to_csv(&strong, &lines))?;
    Ok(())
}
