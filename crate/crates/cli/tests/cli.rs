use std::process::Command;

fn fep() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fep"))
}

#[test]
fn sample_prints_ergodic_rings() {
    let out = fep().args(["sample", "--len", "20", "--count", "3", "--seed", "5"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    for l in lines {
        assert_eq!(l.len(), 20);
        assert!(!l.contains("00"));
    }
}

#[test]
fn run_writes_outputs_and_reports_checks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("entropy.toml");
    std::fs::write(
        &cfg,
        "kind = \"entropy\"\nn = 1e6\ninitial = { kind = \"gaussian\", amplitude = 1.0, center = 0.0, width = 0.1 }\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let status = fep()
        .args(["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("summary.json").exists());
    assert!(out.join("entropy.csv").exists());
}

#[test]
fn failing_checks_set_the_exit_code() {
    // a tolerance no finite-N value can meet
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("entropy.toml");
    std::fs::write(
        &cfg,
        "kind = \"entropy\"\nn = 1e4\ntolerance = 1e-9\ninitial = { kind = \"gaussian\", amplitude = 1.0, center = 0.0, width = 0.1 }\n",
    )
    .unwrap();
    let status = fep().args(["run", cfg.to_str().unwrap()]).status().unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn invalid_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "kind = \"hydro\"\nrho = 0.3\n").unwrap();
    let out = fep().args(["run", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("rho:"), "{err}");
}

#[test]
fn verify_checks_balance() {
    let out = fep().args(["verify", "--len", "8", "--particles", "5"]).output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().matches("[PASS]").count(), 2);
}

#[test]
fn hydro_and_simulate_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let s = fep()
        .args(["hydro", "--initial", "gaussian:1,0,0.1", "--forcing", "gaussian:1,0,0.1", "--steps", "100", "--out", d])
        .status()
        .unwrap();
    assert!(s.success());
    let trace = dir.path().join("trace.bin");
    let s = fep()
        .args(["simulate", "--len", "100", "--n", "50", "--out", d, "--trace", trace.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(s.success());
    let csv = std::fs::read_to_string(dir.path().join("simulate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 12);
    assert_eq!(std::fs::metadata(&trace).unwrap().len() % 12, 0);
}
