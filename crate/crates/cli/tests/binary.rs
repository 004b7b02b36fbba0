use std::path::Path;
use std::process::{Command, Output};

fn parafreq(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parafreq"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

const CONFIG: &str = r#"{
  "domain": {"kind": "cycle", "n": 4},
  "equation": {"kind": "linear", "phi": {"kind": "constant", "value": 0}},
  "time": {"a": 0, "b": 1, "K": 100},
  "init": {"kind": "eigenmode", "k": 1},
  "checks": ["monotonicity", "rigidity"]
}"#;

#[test]
fn version_flag_prints_version() {
    let dir = tempfile::tempdir().unwrap();
    let out = parafreq(&["--version"], dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn run_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ok.json");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = parafreq(&["run", "--config", "ok.json", "--out", "ok"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).ends_with("ALL CHECKS PASSED\n"));
    assert!(dir.path().join("ok/frequency.csv").is_file());

    let failing = CONFIG.replace(
        r#""checks""#,
        r#""self_test": {"inject": "decreasing_frequency"}, "checks""#,
    );
    std::fs::write(dir.path().join("bad.json"), failing).unwrap();
    let out = parafreq(&["run", "--config", "bad.json", "--out", "bad"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    std::fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
    let out = parafreq(&["run", "--config", "broken.json", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte"));

    let out = parafreq(&["run", "--config", "missing.json", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn spectrum_dumps_eigenvalues() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), CONFIG).unwrap();
    let out = parafreq(&["spectrum", "--config", "c.json"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "k,lambda");
    // unit cycle C4: 0, 2, 2, 4
    let values: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    for (got, want) in values.iter().zip([0.0, 2.0, 2.0, 4.0]) {
        assert!((got - want).abs() < 1e-12, "{values:?}");
    }
}

#[test]
fn tampered_log_derivative_tolerance_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = parafreq(
        &[
            "verify",
            "--suite",
            "small",
            "--seed",
            "42",
            "--out",
            "v",
            "--tol",
            "c05.log_derivative=0",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text
        .lines()
        .any(|l| l.starts_with("c05.log_derivative ") && l.ends_with("FAIL <<")));
    assert!(text.ends_with("1 FAILED\n"));
}

#[test]
fn unknown_override_is_an_execution_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = parafreq(&["verify", "--out", "v", "--tol", "no_such_check=1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unwritable_output_directory_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("blocker"), "a file, not a directory").unwrap();
    let out = parafreq(&["verify", "--suite", "small", "--out", "blocker/sub"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
