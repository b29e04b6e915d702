use std::path::Path;
use std::process::{Command, Output};

fn freestream(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freestream")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

const TINY: &str = r#"
name = "tiny"
reproduces = "slab sojourn bound"
pipeline = "sojourn"
[run]
checks = ["tau-lower-bound"]
[[case]]
label = "a"
geometry = { kind = "slab", half_width = 0.5, speed = [0.0, 1.0] }
grid = { resolution = [8, 8], rule = "trapezoid" }
"#;

#[test]
fn list_names_every_bundled_scenario() {
    let out = freestream(&["list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for (name, _) in freestream::scenario::bundled() {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name} missing from\n{text}");
    }
}

#[test]
fn validate_accepts_and_rejects() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "good.toml", TINY);
    assert_eq!(freestream(&["validate", "--config", &good]).status.code(), Some(0));
    assert_eq!(freestream(&["validate", "--config", "slab-mitosis"]).status.code(), Some(0));
    let bad = write(dir.path(), "bad.toml", &TINY.replace("half_width", "width"));
    let out = freestream(&["validate", "--config", &bad]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
    assert_eq!(freestream(&["validate", "--config", "no-such-scenario"]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(freestream(&[]).status.code(), Some(2));
    assert_eq!(freestream(&["run", "--bogus"]).status.code(), Some(2));
    assert_eq!(freestream(&["run", "--config", "slab-regularity", "--workers", "0"]).status.code(), Some(2));
}

#[test]
fn config_errors_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    // parses, but the slab velocity resolution must be even
    let cfg = write(dir.path(), "odd.toml", &TINY.replace("[8, 8]", "[8, 7]"));
    let out = freestream(&["run", "--config", &cfg, "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn failing_check_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    // midpoint velocities never reach the top speed, so the top-speed check has no nodes
    let text = TINY.replace("\"tau-lower-bound\"", "\"top-speed-tau\"").replace(", rule = \"trapezoid\"", "");
    let cfg = write(dir.path(), "fail.toml", &text);
    let out_dir = dir.path().join("out");
    let out = freestream(&["run", "--config", &cfg, "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stdout));
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().ends_with(",false"));
}

#[test]
fn runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (d, workers) in [(&a, "1"), (&b, "4")] {
        let out = freestream(&[
            "run",
            "--config",
            "resolvent-balance",
            "--out-dir",
            d.to_str().unwrap(),
            "--workers",
            workers,
            "--seed",
            "7",
        ]);
        assert_eq!(out.status.code(), Some(0));
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 4);
    for name in names {
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn every_bundled_scenario_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = freestream(&["run", "--out-dir", dir.path().to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}{}", String::from_utf8_lossy(&out.stderr));
    for (name, _) in freestream::scenario::bundled() {
        assert!(dir.path().join(name).join("summary.csv").exists(), "{name}");
    }
}
