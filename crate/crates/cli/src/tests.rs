//! Whole-command runs through the argument parser, in process.

use std::fs;
use std::path::Path;

use clap::Parser;

use crate::{exit_code, run, Cli};

fn run_args(args: &[&str]) -> anyhow::Result<()> {
    let cli = Cli::try_parse_from(std::iter::once("deconforge").chain(args.iter().copied()))?;
    run(&cli)
}

fn ok(args: &[&str]) {
    if let Err(e) = run_args(args) {
        panic!("{args:?}: {e:#}");
    }
}

/// Exit code and message of a command that must fail.
fn failure(args: &[&str]) -> (u8, String) {
    let e = run_args(args).expect_err("command should fail");
    (exit_code(&e), format!("{e:#}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, reps: &str, extra: &[&str]) {
    let mut args = vec!["simulate", "-B", reps, "--seed", "4", "--out", p(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

fn fit(rep: &Path, out: &Path, extra: &[&str]) {
    let data = rep.join("data.csv");
    let cov = rep.join("covariates.csv");
    let mut args = vec!["fit", "--data", p(&data), "--covariates", p(&cov), "--out", p(out), "--iters", "30", "--burn-in", "10", "--thin", "2"];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn zero_replicates_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, msg) = failure(&["simulate", "-B", "0", "--out", p(&dir.path().join("sim"))]);
    assert_eq!(code, 2);
    assert!(msg.contains("replicate count"), "{msg}");
}

#[test]
fn default_simulation_has_the_benchmark_size_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    simulate(&a, "1", &[]);
    simulate(&b, "1", &[]);
    let data = fs::read_to_string(a.join("rep_001/data.csv")).unwrap();
    assert_eq!(data.lines().count(), 1 + 965 * 3 * 3);
    assert!(a.join("rep_001/truth.json").is_file());
    for f in ["data.csv", "covariates.csv", "truth.json"] {
        assert_eq!(fs::read(a.join("rep_001").join(f)).unwrap(), fs::read(b.join("rep_001").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn occupied_output_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    simulate(&sim, "1", &["--n", "30"]);
    assert_eq!(failure(&["simulate", "--n", "30", "--out", p(&sim)]).0, 2);
    simulate(&sim, "1", &["--n", "30", "--force"]);
}

#[test]
fn missing_input_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = failure(&["fit", "--data", "/nonexistent/data.csv", "--covariates", "/nonexistent/cov.csv", "--out", p(&dir.path().join("fit"))]);
    assert_eq!(code, 2);
}

#[test]
fn fit_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    simulate(&sim, "1", &["--n", "320"]);
    let out = dir.path().join("fit");
    fit(&sim.join("rep_001"), &out, &["--subsample", "300"]);
    for f in ["densities_marginal.csv", "inclusion.json", "correlations.json", "varfun.csv", "trace_k.csv", "meta.json", "manifest.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let joints = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("densities_joint_")).count();
    assert!(joints > 0);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 0);
    let varfun = fs::read_to_string(out.join("varfun.csv")).unwrap();
    assert_eq!(varfun.lines().count(), 1 + 3 * 201);
}

#[test]
fn density_mode_skips_the_variance_function() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    simulate(&sim, "1", &["--n", "100", "--error-free"]);
    let out = dir.path().join("fit");
    fit(&sim.join("rep_001"), &out, &["--mode", "density"]);
    assert!(out.join("densities_marginal.csv").is_file());
    assert!(!out.join("varfun.csv").exists());
}

#[test]
fn evaluate_and_summarize() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    simulate(&sim, "2", &["--n", "60"]);
    let fits = dir.path().join("fits");
    fs::create_dir(&fits).unwrap();
    for r in ["rep_001", "rep_002"] {
        fit(&sim.join(r), &fits.join(r), &["--chains", "2"]);
    }
    let eval = dir.path().join("eval");
    ok(&["evaluate", "--truths", p(&sim), "--archives", p(&fits), "--out", p(&eval)]);
    let table = fs::read_to_string(eval.join("mise_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 6);
    assert!(eval.join("selection_table.csv").is_file());

    ok(&["summarize", "--archive", p(&fits.join("rep_001"))]);
    let text = fs::read_to_string(fits.join("rep_001/summary.txt")).unwrap();
    assert!(text.contains("R-hat") && text.contains("inclusion"), "{text}");

    // a fit without its truth is reported by replicate name
    fs::remove_dir_all(sim.join("rep_002")).unwrap();
    let (code, msg) = failure(&["evaluate", "--truths", p(&sim), "--archives", p(&fits), "--out", p(&dir.path().join("eval2"))]);
    assert_eq!(code, 2);
    assert!(msg.contains("rep_002"), "{msg}");
}
