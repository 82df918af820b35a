use std::path::Path;
use std::process::{Command, Output};

fn fvsim(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fvsim")).args(args).current_dir(cwd).output().expect("spawn fvsim")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn qsd_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    ok(&fvsim(&["qsd", "--gamma", "0.05", "--cells", "256", "--out", "a"], dir.path()));
    ok(&fvsim(&["qsd", "--gamma", "0.05", "--cells", "256", "--out", "b"], dir.path()));
    let a = std::fs::read(dir.path().join("a/records.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/records.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn simulate_reloads_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(&fvsim(&["simulate", "--particles", "100", "--steps", "5", "--seed", "9", "--out", "a"], dir.path()));
    ok(&fvsim(&["simulate", "--config", "a/manifest.json", "--out", "b"], dir.path()));
    for f in ["records.csv", "snapshot.csv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn invalid_config_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "gamma = 0.5\n").unwrap();
    let out = fvsim(&["qsd", "--config", "bad.toml", "--out", "run"], dir.path());
    assert!(!out.status.success());
    assert!(!dir.path().join("run").exists());

    std::fs::write(dir.path().join("typo.toml"), "gama = 0.05\n").unwrap();
    let out = fvsim(&["qsd", "--config", "typo.toml", "--out", "run"], dir.path());
    assert!(!out.status.success());
    assert!(!dir.path().join("run").exists());
}

#[test]
fn existing_output_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["oracle", "--steps", "3", "--cells", "128", "--out", "run"];
    ok(&fvsim(&args, dir.path()));
    assert!(!fvsim(&args, dir.path()).status.success());
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&fvsim(&forced, dir.path()));
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".partial"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn experiment_manifest_carries_checks() {
    let dir = tempfile::tempdir().unwrap();
    ok(&fvsim(&["experiment", "gamma_bias", "--out", "gb"], dir.path()));
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("gb/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "experiment");
    assert!(m["metrics"]["order"].as_f64().unwrap() > 0.4);
    assert!(!m["checks"].as_array().unwrap().is_empty());
}

#[test]
fn validate_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = fvsim(&["validate"], dir.path());
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("7 of 7"));
}

#[test]
fn unknown_experiment_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!fvsim(&["experiment", "nope"], dir.path()).status.success());
}
