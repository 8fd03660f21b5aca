//! End-to-end runs of the `mlvgm` binary on the linear oracle.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn mlvgm(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlvgm")).arg("--runs-dir").arg(runs).args(args).output().expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("one JSON line on stdout")
}

fn err_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    assert_eq!(text.trim().lines().count(), 1, "{text}");
    serde_json::from_str(text.trim()).expect("machine-parseable error")
}

fn run_dir(v: &Value) -> PathBuf {
    PathBuf::from(v["run_dir"].as_str().unwrap())
}

fn linear_generator(runs: &Path) -> String {
    let out = mlvgm(runs, &["--set", "generator.kind=linear", "train-toy-gen"]);
    run_dir(&ok_json(&out)).join("generator.json").display().to_string()
}

#[test]
fn probe_then_mc_report_has_level_row() {
    let runs = tempfile::tempdir().unwrap();
    let gen = linear_generator(runs.path());
    let set_gen = format!("generator.checkpoint={gen}");

    let probe = ok_json(&mlvgm(runs.path(), &["--set", &set_gen, "probe", "--level", "2"]));
    let probe_dir = run_dir(&probe);
    assert!(probe_dir.join("probe-2.json").exists());
    assert!(probe_dir.join("config.toml").exists());
    assert!(fs::metadata(probe_dir.join("probe-2.json")).unwrap().permissions().readonly());

    let set_probes = format!("mc.probes=[\"{}\"]", probe_dir.display());
    let report = ok_json(&mlvgm(
        runs.path(),
        &["--set", &set_gen, "--set", &set_probes, "--set", "mc.samples=5000", "mc-report"],
    ));
    let rows = report["summary"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["level"], "2");
    assert!(rows[0]["mu"].as_f64().unwrap() > 0.0);

    // Asking for a level that was never probed is a missing dependency.
    let out = mlvgm(runs.path(), &["--set", &set_gen, "--set", &set_probes, "--set", "mc.levels=[\"1\"]", "mc-report"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn mc_report_without_probes_exits_3() {
    let runs = tempfile::tempdir().unwrap();
    let gen = linear_generator(runs.path());
    let out = mlvgm(runs.path(), &["--set", &format!("generator.checkpoint={gen}"), "mc-report"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(err_json(&out)["error"], "missing-artifact");
}

#[test]
fn invalid_config_exits_2_with_key() {
    let runs = tempfile::tempdir().unwrap();
    let out = mlvgm(runs.path(), &["--set", "probe.gama=1.0", "probe"]);
    assert_eq!(out.status.code(), Some(2));
    let e = err_json(&out);
    assert!(e["key"].as_str().unwrap().contains("gama"), "{e}");

    let out = mlvgm(runs.path(), &["--set", "probe.batch_size=1", "probe"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(err_json(&out)["key"], "probe.batch_size");

    // Nothing is written for a rejected config.
    assert_eq!(fs::read_dir(runs.path()).map(|d| d.count()).unwrap_or(0), 0);

    let out = mlvgm(runs.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn frozen_config_replays_bit_identically() {
    let runs = tempfile::tempdir().unwrap();
    let gen = linear_generator(runs.path());
    let set_gen = format!("generator.checkpoint={gen}");
    let args = ["--set", &set_gen, "--set", "probe.max_iters=800", "--set", "seed=5", "probe", "--level", "3"];
    let first = run_dir(&ok_json(&mlvgm(runs.path(), &args)));
    let frozen = first.join("config.toml").display().to_string();
    let second = run_dir(&ok_json(&mlvgm(runs.path(), &["--config", &frozen, "probe", "--level", "3"])));
    assert_eq!(fs::read_to_string(second.join("seed")).unwrap().trim(), "5");
    for f in ["probe-3.safetensors", "probe-3-curve.csv"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn defaults_reference_lists_every_section() {
    let runs = tempfile::tempdir().unwrap();
    let out = mlvgm(runs.path(), &["defaults"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for s in ["[generator", "[probe", "[mc", "[views", "[sampling", "[train", "[eval", "[bench"] {
        assert!(text.contains(s), "missing {s}");
    }
}
