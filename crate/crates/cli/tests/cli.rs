use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_volterra-rff")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("volterra-rff-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin()).current_dir(dir).args(args).output().unwrap()
}

fn data_rows(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect()
}

#[test]
fn spectral_density_table_matches_oracle() {
    let dir = scratch("spectral");
    let out = run(&dir, &["spectral-density", "--H", "0.01", "--lambda2", "auto", "--nu2", "1", "--T", "40", "--d", "1", "--rmax", "2", "--out", "f.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.join("f.csv")).unwrap();
    assert!(text.lines().any(|l| l == "r,f,f_oracle,abs_err"));
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 201);
    let fmax = rows.iter().map(|r| r[1]).fold(0.0, f64::max);
    let emax = rows.iter().map(|r| r[3]).fold(0.0, f64::max);
    assert!(emax <= 1e-8 * fmax, "{emax} vs {fmax}");
}

#[test]
fn sample_simulate_and_estimate_pipeline() {
    let dir = scratch("pipeline");
    let out = run(&dir, &["sample-features", "--H", "0.1", "--nu2", "50", "--T", "100", "--M", "8000", "--seed", "7", "--out", "feats.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let feats = std::fs::read_to_string(dir.join("feats.csv")).unwrap();
    assert_eq!(feats.lines().filter(|l| !l.starts_with('#')).count(), 8000);
    assert!(feats.lines().any(|l| l.starts_with("# seed=7")));
    let diag: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("feats.csv.diagnostics.json")).unwrap()).unwrap();
    for key in ["acceptance_rate", "ess", "rho_hat", "tuned_epsilon"] {
        assert!(diag[key].is_number(), "{key}");
    }

    let args = ["simulate", "--scheme", "rff", "--features", "feats.csv", "--N", "1000", "--Tf", "1", "--sigma0", "0.3", "--beta", "0.1", "--seed", "3", "--out", "path.csv"];
    assert!(run(&dir, &args).status.success());
    let first = std::fs::read(dir.join("path.csv")).unwrap();
    assert!(run(&dir, &args).status.success());
    assert_eq!(first, std::fs::read(dir.join("path.csv")).unwrap());
    let rows = data_rows(&String::from_utf8(first).unwrap());
    assert_eq!(rows.len(), 1001);
    assert_eq!(rows[0], vec![0.0, 0.0]);
    assert_eq!(rows[1000][0], 1.0);

    let out = run(&dir, &["estimate", "--features", "feats.csv"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let h = v["result"]["h_hat"].as_f64().unwrap();
    let l2 = v["result"]["lambda2_hat"].as_f64().unwrap();
    assert!((h - 0.1).abs() < 0.05 && (l2 / 4.0 - 1.0).abs() < 0.25, "H {h} lambda2 {l2}");
}

#[test]
fn estimate_from_covariance_pairs() {
    let dir = scratch("cov");
    let params = volterra_rff::SfbmParams::new(0.15, 0.03, 50.0, 1).unwrap();
    let mut csv = String::from("lag,covariance\n");
    for lag in volterra_rff::estimation::default_lags(16) {
        csv.push_str(&format!("{lag},{}\n", volterra_rff::Kernel::eval(&params, lag)));
    }
    std::fs::write(dir.join("cov.csv"), csv).unwrap();
    let out = run(&dir, &["estimate", "--cov", "cov.csv", "--fix-t", "50"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["result"]["h_hat"].as_f64().unwrap() - 0.15).abs() < 1e-4);
    assert!((v["result"]["lambda2_hat"].as_f64().unwrap() - 0.03).abs() < 1e-5);
}

#[test]
fn trials_mode_writes_summary() {
    let dir = scratch("trials");
    let out = run(&dir, &["estimate", "--trials", "3", "--H", "0.1", "--lambda2", "0.02", "--T", "100", "--M", "4000", "--method", "inverse-cdf", "--out", "t.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.join("t.csv")).unwrap();
    assert!(text.lines().any(|l| l.starts_with("# summary H ")));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 4);
}

#[test]
fn parameter_flags_must_agree() {
    let dir = scratch("agree");
    let bad = run(&dir, &["spectral-density", "--H", "0.1", "--lambda2", "0.5", "--nu2", "1", "--T", "40", "--rmax", "1"]);
    assert_eq!(bad.status.code(), Some(1));
    // nu2 = 0.02/(0.1·0.8) = 0.25.
    let good = run(&dir, &["spectral-density", "--H", "0.1", "--lambda2", "0.02", "--nu2", "0.25", "--T", "40", "--rmax", "1", "--points", "3"]);
    assert_eq!(good.status.code(), Some(0), "{}", String::from_utf8_lossy(&good.stderr));
    let missing = run(&dir, &["spectral-density", "--H", "0.1", "--T", "40", "--rmax", "1"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = scratch("usage");
    let out = run(&dir, &["simulate", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&dir, &[]).status.code(), Some(1));
    assert_eq!(run(&dir, &["simulate", "--scheme", "rff", "--N", "10"]).status.code(), Some(1));
    assert_eq!(run(&dir, &["kernel-error", "--features", "missing.csv"]).status.code(), Some(1));
}

#[test]
fn numerical_failure_exits_with_two() {
    let dir = scratch("numerical");
    let out = run(&dir, &["simulate", "--scheme", "euler", "--H", "0.1", "--nu2", "1", "--T", "200", "--N", "50", "--sigma0", "1e300", "--beta", "1e10"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_documents_every_subcommand() {
    let dir = scratch("help");
    for sub in ["spectral-density", "sample-features", "kernel-error", "simulate", "estimate", "bench", "error-analysis"] {
        let out = run(&dir, &[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("--seed") && text.contains("--config"), "{sub}");
    }
}

#[test]
fn config_file_is_merged_under_flags() {
    let dir = scratch("config");
    std::fs::write(dir.join("c.json"), r#"{"H": 0.2, "nu2": 1.0, "T": 10.0, "rmax": 1.0, "points": 5, "seed": 4}"#).unwrap();
    let a = run(&dir, &["spectral-density", "--config", "c.json"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let text = String::from_utf8(a.stdout).unwrap();
    assert!(text.contains("# seed=4"));
    assert!(text.contains("\"H\":0.2"));
    let b = run(&dir, &["spectral-density", "--config", "c.json", "--H", "0.3", "--seed", "9"]);
    let text = String::from_utf8(b.stdout).unwrap();
    assert!(text.contains("\"H\":0.3") && text.contains("# seed=9"));
    std::fs::write(dir.join("bad.json"), r#"{"H": 0.2, "unknown_key": 1}"#).unwrap();
    assert_eq!(run(&dir, &["spectral-density", "--config", "bad.json"]).status.code(), Some(1));
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = scratch("threads");
    let args = ["error-analysis", "--H", "0.1", "--Ms", "50,100", "--N", "40", "--paths", "8", "--bootstrap", "20", "--method", "inverse-cdf", "--out-dir", "o"];
    let one = run(&dir, &[&args[..], &["--threads", "1"]].concat());
    assert!(one.status.success(), "{}", String::from_utf8_lossy(&one.stderr));
    let a = std::fs::read(dir.join("o/weak_error.csv")).unwrap();
    let three = Command::new(bin()).current_dir(&dir).args(args).env("VOLTERRA_RFF_THREADS", "3").output().unwrap();
    assert!(three.status.success());
    assert_eq!(a, std::fs::read(dir.join("o/weak_error.csv")).unwrap());
}

#[test]
fn cholesky_scheme_needs_constant_volatility() {
    let dir = scratch("cholesky");
    let p = ["--H", "0.1", "--nu2", "1", "--T", "10", "--N", "20"];
    assert_eq!(run(&dir, &[&["simulate", "--scheme", "cholesky", "--beta", "0.1"], &p[..]].concat()).status.code(), Some(1));
    let ok = run(&dir, &[&["simulate", "--scheme", "cholesky", "--beta", "0"], &p[..]].concat());
    assert!(ok.status.success());
    assert_eq!(data_rows(&String::from_utf8(ok.stdout).unwrap()).len(), 21);
}
