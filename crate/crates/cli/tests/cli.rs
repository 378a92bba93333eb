use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_npunas")).args(args).output().expect("spawn npunas")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "npunas {} failed: {}", args.join(" "), stderr(&out));
    stdout(&out)
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A desk config shrunk so every subcommand finishes in a few seconds.
fn small_config(dir: &TempDir, edit: impl FnOnce(&mut toml::Table)) -> PathBuf {
    let file = dir.path().join("config.toml");
    ok(&["supernet", "init", path(&file)]);
    let mut cfg: toml::Table = fs::read_to_string(&file).unwrap().parse().unwrap();
    let set = |cfg: &mut toml::Table, section: &str, key: &str, value: toml::Value| {
        cfg[section].as_table_mut().unwrap().insert(key.into(), value);
    };
    set(&mut cfg, "task", "samples_per_class", 20.into());
    set(&mut cfg, "search", "phase1_epochs", 1.into());
    set(&mut cfg, "search", "phase2_epochs", 1.into());
    set(&mut cfg, "train", "epochs", 1.into());
    set(&mut cfg, "baseline", "count", 2.into());
    set(&mut cfg, "postprocess", "dispersion_samples", 20.into());
    edit(&mut cfg);
    fs::write(&file, toml::to_string(&cfg).unwrap()).unwrap();
    file
}

fn assert_error(out: &Output, kind: &str, code: i32) {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", stderr(out));
    let err = stderr(out);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {err:?}");
    assert!(lines[0].starts_with(&format!("error kind={kind} code={code}: ")), "{}", lines[0]);
}

#[test]
fn unknown_preset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--preset", "huge", "supernet", "init", path(&dir.path().join("x.toml"))]);
    assert_error(&out, "config", 2);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir, |cfg| {
        cfg["search"].as_table_mut().unwrap().insert("lamda1".into(), 1.0.into());
    });
    let out = run(&["--config", path(&cfg), "supernet", "validate"]);
    assert_error(&out, "config", 2);
    assert!(stderr(&out).contains("lamda1"));
}

#[test]
fn unreachable_target_is_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir, |_| {});
    let out = run(&[
        "--config",
        path(&cfg),
        "baseline",
        "random-selection",
        "--target-ms",
        "1e-9",
        path(&dir.path().join("out")),
    ]);
    assert_error(&out, "infeasible", 3);
}

#[test]
fn removing_se_from_an_arch_without_se_is_an_invariant_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir, |_| {});
    let c = path(&cfg);
    let search = dir.path().join("search");
    ok(&["--config", c, "search", "run", "--target-percentile", "40", path(&search)]);
    let plain = search.join("arch.toml");
    let with_se = dir.path().join("se.toml");
    let report = dir.path().join("dispersion.csv");
    ok(&["--config", c, "postprocess", "add-se", path(&plain), path(&with_se)]);
    let line = ok(&["--config", c, "postprocess", "dispersion", path(&with_se), path(&report)]);
    assert!(line.starts_with("se_blocks="), "{line}");
    let pruned = dir.path().join("pruned.toml");
    ok(&["--config", c, "postprocess", "remove-se", path(&with_se), path(&report), path(&pruned)]);

    let out = run(&["--config", c, "postprocess", "remove-se", path(&plain), path(&report), path(&pruned)]);
    assert_error(&out, "invariant", 4);
}

#[test]
fn exploding_learning_rate_is_a_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir, |cfg| {
        cfg["train"].as_table_mut().unwrap().insert("lr".into(), 1e30.into());
    });
    let out = run(&[
        "--config",
        path(&cfg),
        "baseline",
        "random-selection",
        "--target-percentile",
        "40",
        "--evaluate",
        path(&dir.path().join("out")),
    ]);
    assert_error(&out, "divergence", 5);
}

#[test]
fn zero_penalty_weight_skips_the_second_phase() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir, |cfg| {
        cfg["search"].as_table_mut().unwrap().insert("lambda1".into(), 0.0.into());
    });
    let out_dir = dir.path().join("search");
    let line = ok(&["--config", path(&cfg), "search", "run", "--target-percentile", "40", path(&out_dir)]);
    assert!(line.contains("phase2=false"), "{line}");
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.lines().count() >= 2);
}

#[test]
fn search_outputs_round_trip_through_export_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir, |_| {});
    let c = path(&cfg);
    let out_dir = dir.path().join("search");
    let line = ok(&["--config", c, "search", "run", "--target-percentile", "40", path(&out_dir)]);
    assert!(line.contains("feasible=true"), "{line}");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["feasible"], true);

    let exported = dir.path().join("exported.toml");
    let ckpt = out_dir.join("supernet.ckpt.json");
    ok(&["--config", c, "export", "--target-percentile", "40", path(&ckpt), path(&exported)]);
    assert_eq!(fs::read(&exported).unwrap(), fs::read(out_dir.join("arch.toml")).unwrap());
    let line = ok(&["--config", c, "supernet", "validate", path(&exported)]);
    assert!(line.starts_with("ok blocks="), "{line}");
}

#[test]
fn validate_model_reports_mape() {
    let line = ok(&["latency", "validate-model", "--samples", "10"]);
    assert!(line.starts_with("mape_percent="), "{line}");
    let mape: f64 = line.split_whitespace().next().unwrap()["mape_percent=".len()..].parse().unwrap();
    assert!(mape.is_finite() && mape >= 0.0);
}

#[test]
fn scaling_with_unit_coefficients_is_the_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir, |_| {});
    let c = path(&cfg);
    let out_dir = dir.path().join("search");
    ok(&["--config", c, "search", "run", "--target-percentile", "40", path(&out_dir)]);
    let scaled = dir.path().join("scaled.toml");
    ok(&["--config", c, "scale", path(&out_dir.join("arch.toml")), path(&scaled)]);
    assert_eq!(fs::read(&scaled).unwrap(), fs::read(out_dir.join("arch.toml")).unwrap());
}
