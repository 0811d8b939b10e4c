use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "scenarios", name].iter().collect()
}

fn cke(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cke"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn sweep_writes_csv_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fig3.csv");
    let run = cke(&[
        "sweep",
        path_str(&scenario("fig3.scenario.json")),
        "--out",
        path_str(&out),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("theta_deg,cost,gain_norm,residual,stabilizing,oracle_cost")
    );
    assert_eq!(lines.count(), 180);
}

#[test]
fn reruns_are_byte_identical() {
    let fig4 = scenario("fig4.scenario.json");
    let first = cke(&["sweep", path_str(&fig4)]);
    let second = cke(&["sweep", path_str(&fig4)]);
    let sequential = cke(&["--sequential", "sweep", path_str(&fig4)]);
    assert!(first.status.success());
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(first.stdout, sequential.stdout);
}

#[test]
fn json_format_is_an_array_of_rows() {
    let run = cke(&[
        "sweep",
        path_str(&scenario("heterodyne.scenario.json")),
        "--format",
        "json",
    ]);
    assert!(run.status.success());
    let rows: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 180);
    assert!((rows[0]["cost"].as_f64().unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn oracle_and_realizable_succeed() {
    let oracle = cke(&["oracle", path_str(&scenario("fig4.scenario.json")), "--theta", "135"]);
    assert!(oracle.status.success());
    let report: serde_json::Value = serde_json::from_slice(&oracle.stdout).unwrap();
    assert_eq!(report["agrees"], true);

    let real = cke(&["realizable", path_str(&scenario("squeezer.system.json"))]);
    assert!(real.status.success(), "{}", String::from_utf8_lossy(&real.stderr));
    let report: serde_json::Value = serde_json::from_slice(&real.stdout).unwrap();
    assert_eq!(report["kind"], "dynamic");
}

#[test]
fn config_errors_exit_with_two() {
    let missing = cke(&["sweep", "/nonexistent/scenario.json"]);
    assert_eq!(missing.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(cke(&["sweep", path_str(&bad)]).status.code(), Some(2));

    assert_eq!(cke(&["sweep"]).status.code(), Some(2));
}

#[test]
fn solver_failures_exit_with_one_unless_allowed() {
    // a tolerance no solver can meet
    let fig3 = scenario("fig3.scenario.json");
    let strict = cke(&["--tol", "1e-300", "sweep", path_str(&fig3)]);
    assert_eq!(strict.status.code(), Some(1));
    let allowed = cke(&["--tol", "1e-300", "--allow-failures", "sweep", path_str(&fig3)]);
    assert_eq!(allowed.status.code(), Some(0));
}
