use freestream::scenario::{bundled, bundled_config, run_scenario, ScenarioConfig};
use freestream::Error;

#[test]
fn bundled_scenarios_pass_and_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    for (name, _) in bundled() {
        let cfg = bundled_config(name).unwrap();
        let outcome = run_scenario(&cfg, None).unwrap();
        let failed: Vec<_> = outcome.checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{name}: {failed:?}");
        let out = dir.path().join(name);
        outcome.write(&out).unwrap();
        let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), outcome.checks.len() + 1);
        for table in outcome.tables.keys() {
            assert!(out.join(table).exists(), "{name}: {table}");
        }
    }
}

#[test]
fn tabulated_kernel_resolves_against_config_dir() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("x,y,value\n");
    for l in [0.5, 1.0, 1.5] {
        for lp in [0.5, 1.0, 1.5] {
            csv.push_str(&format!("{l},{lp},2\n"));
        }
    }
    std::fs::write(dir.path().join("kernel.csv"), csv).unwrap();
    let toml = r#"
name = "tabulated"
reproduces = "a tabulated constant kernel matches the constant one"
pipeline = "population"
[run]
t_final = 30.0
outputs = 300
checks = ["wellposedness", "positive"]
[[case]]
label = "table"
geometry = { kind = "population", l1 = 0.5, l2 = 1.5 }
grid = { resolution = [16, 32] }
operator = { kind = "birth-law", kernel = { table = "kernel.csv" } }
"#;
    let path = dir.path().join("tabulated.toml");
    std::fs::write(&path, toml).unwrap();
    let cfg = ScenarioConfig::from_path(&path).unwrap();
    let outcome = run_scenario(&cfg, None).unwrap();
    assert!(outcome.passed(), "{:?}", outcome.checks);

    std::fs::remove_file(dir.path().join("kernel.csv")).unwrap();
    assert!(run_scenario(&cfg, None).is_err());
}

#[test]
fn seeds_change_only_randomised_rows() {
    let cfg = bundled_config("resolvent-balance").unwrap();
    let a = run_scenario(&cfg, Some(1)).unwrap();
    let b = run_scenario(&cfg, Some(1)).unwrap();
    assert_eq!(a.summary_csv().unwrap(), b.summary_csv().unwrap());
    assert_eq!(a.tables, b.tables);
    let c = run_scenario(&cfg, Some(2)).unwrap();
    for (x, y) in a.checks.iter().zip(&c.checks) {
        if !x.check.starts_with("norm-bounds") {
            assert_eq!(x, y);
        }
    }
}

#[test]
fn incompatible_configs_are_config_errors() {
    let text = bundled().iter().find(|(n, _)| *n == "slab-mitosis").unwrap().1;
    let wrong_pipeline = text.replace("pipeline = \"criterion\"", "pipeline = \"resolvent\"");
    let err = ScenarioConfig::parse(&wrong_pipeline).unwrap_err();
    assert!(matches!(err, Error::Config(_)) && err.is_input_error());
    let missing = text.replace("[[case]]", "[[cases]]");
    assert!(ScenarioConfig::parse(&missing).is_err());
}
