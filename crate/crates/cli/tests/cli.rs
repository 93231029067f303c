use std::path::Path;
use std::process::{Command, Output};

fn crossalpha(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossalpha"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = crossalpha(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &str = r#"
[synth.market]
n_securities = 60
n_days = 700

[backtest]
train_days = 300
"#;

#[test]
fn version_prints_package_version() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["version"]);
    assert_eq!(out.trim(), format!("crossalpha {}", env!("CARGO_PKG_VERSION")));
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = crossalpha(dir.path(), &["--config", "absent.toml", "synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.toml"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[optimizer]\nwmax = 0.1\n").unwrap();
    let out = crossalpha(dir.path(), &["--config", "c.toml", "synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("wmax"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(crossalpha(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn help_shows_config_reference() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(dir.path(), &["--help"]);
    for needle in ["[optimizer]", "lambda_risk = 10.0", "rebalance_every = 20", "backtest.purge_gap"] {
        assert!(help.contains(needle), "help lacks {needle}");
    }
}

#[test]
fn missing_panel_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = crossalpha(dir.path(), &["factors", "--panel", "none.csv", "--out", "f"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn optimize_writes_weights_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir(d.join("risk")).unwrap();
    std::fs::write(d.join("risk/loadings.csv"), "security,mkt\nA,1.0\nB,0.8\nC,1.2\nD,0.9\n").unwrap();
    std::fs::write(d.join("risk/factor_cov.csv"), "factor,mkt\nmkt,0.0001\n").unwrap();
    std::fs::write(d.join("risk/idio_var.csv"), "security,idio_var\nA,0.0004\nB,0.0003\nC,0.0005\nD,0.0002\n").unwrap();
    std::fs::write(d.join("mu.csv"), "security_id,mu\nA,0.02\nB,-0.01\nC,0.005\nD,-0.015\n").unwrap();
    std::fs::write(d.join("sec.csv"), "security_id,industry\nA,0\nB,0\nC,1\nD,1\n").unwrap();
    std::fs::write(d.join("c.toml"), "[optimizer]\nw_max = 0.5\n").unwrap();
    ok(d, &["--config", "c.toml", "optimize", "--mu", "mu.csv", "--risk", "risk", "--sectors", "sec.csv", "--out", "opt"]);
    let text = std::fs::read_to_string(d.join("opt/weights.csv")).unwrap();
    let w: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(w.len(), 4);
    assert!(w[0] > 0.0 && w[1] < 0.0, "{w:?}");
    assert!((w[0] + w[1]).abs() < 1e-6 && (w[2] + w[3]).abs() < 1e-6);
    assert!(d.join("opt/manifest.txt").exists());
}

fn pipeline(dir: &Path, bundle: &str) {
    let cfg = ["--config", "small.toml"];
    let run = |rest: &[&str]| ok(dir, &[&cfg[..], rest].concat());
    run(&["--seed", "7", "synth", "--signal-strength", "0.3", "--out", "panel.csv", "--factor-out", "fac/planted.csv"]);
    run(&["factors", "--panel", "panel.csv", "--out", "fac"]);
    run(&["neutralize", "--panel", "panel.csv", "--factors", "fac", "--out", "neu"]);
    run(&["eval", "--panel", "panel.csv", "--factors", "neu", "--report", "ic.csv"]);
    run(&["--seed", "7", "backtest", "--panel", "panel.csv", "--factors", "neu", "--out", bundle]);
}

#[test]
fn end_to_end_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    pipeline(d, "run1");
    let first_panel = std::fs::read(d.join("panel.csv")).unwrap();
    pipeline(d, "run2");
    assert_eq!(first_panel, std::fs::read(d.join("panel.csv")).unwrap());
    for file in ["metrics.csv", "equity.csv", "weights.csv", "attribution.csv", "manifest.txt"] {
        let a = std::fs::read(d.join("run1").join(file)).unwrap();
        let b = std::fs::read(d.join("run2").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }
    let report = std::fs::read_to_string(d.join("ic.csv")).unwrap();
    assert!(report.starts_with("factor,mean_ic,ic_std,ir,positive_ic_rate,n_dates"));
    assert_eq!(report.lines().count(), 5);
    assert!(d.join("neu/reports/planted.csv").exists());
    let manifest = std::fs::read_to_string(d.join("run1/manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 7") && manifest.contains("command = backtest"));
}
