use std::fs;
use std::process::Command;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bench"))
}

#[test]
fn irdd_writes_csv_plot_and_measurement() {
    let out = tempfile::tempdir().unwrap();
    let status = bench()
        .args(["irdd", "--iaas", "2..3", "--reps", "4", "--seed", "3", "--out"])
        .arg(out.path())
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let csv = fs::read_to_string(out.path().join("samples.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("metric,backend,iaas_count,rep,value_ms"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 4);
    assert!(out.path().join("irdd.svg").exists());
    assert!(out.path().join("measurement.json").exists());

    let again = tempfile::tempdir().unwrap();
    let replot = bench()
        .arg("plot")
        .arg(out.path().join("samples.csv"))
        .arg("--out")
        .arg(again.path())
        .output()
        .unwrap();
    assert!(replot.status.success());
    assert_eq!(
        fs::read(out.path().join("irdd.svg")).unwrap(),
        fs::read(again.path().join("irdd.svg")).unwrap()
    );
}

#[test]
fn tad_prints_each_receiver() {
    let out = tempfile::tempdir().unwrap();
    let o = bench()
        .args(["tad", "--iaas", "4", "--reps", "3", "--out"])
        .arg(out.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    for r in ["iaas-2", "iaas-3", "iaas-4"] {
        assert!(stdout.contains(r), "{stdout}");
    }
}

#[test]
fn fire_suppression_reports_and_names_violations() {
    let out = tempfile::tempdir().unwrap();
    let ok = bench().args(["fire-suppression", "--out"]).arg(out.path()).output().unwrap();
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("SENSED light"));
    assert!(out.path().join("events.json").exists());

    let bad = bench()
        .args(["fire-suppression", "--without-light", "--out"])
        .arg(out.path())
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("invariant violated") && err.contains("light"), "{err}");
}

#[test]
fn run_executes_a_scenario_file() {
    let out = tempfile::tempdir().unwrap();
    let o = bench()
        .arg("run")
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/default.toml"))
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("8 marketplace records"));
    let log: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.path().join("events.json")).unwrap()).unwrap();
    assert!(log.as_array().is_some_and(|a| !a.is_empty()));
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [&["irdd", "--iaas", "1..3"][..], &["tad", "--iaas", "1"], &["irdd", "--backends", "carrier-pigeon"]] {
        let o = bench().args(args).arg("--out").arg(std::env::temp_dir()).output().unwrap();
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
    let empty = tempfile::tempdir().unwrap();
    let csv = empty.path().join("samples.csv");
    fs::write(&csv, "metric,backend,iaas_count,rep,value_ms\n").unwrap();
    let o = bench().arg("plot").arg(&csv).arg("--out").arg(empty.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
