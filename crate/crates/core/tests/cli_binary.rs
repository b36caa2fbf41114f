use std::path::Path;
use std::process::{Command, Output};

fn loadsim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loadsim"))
        .args(args)
        .current_dir(dir)
        .env("LOADSIM_WORKERS", "2")
        .output()
        .expect("binary runs")
}

const SMALL: &str =
    "workload = qtm:n=61,steps=3\nm = 2,4\npolicies = af,multiagent\nreplicates = 2\n";

#[test]
fn run_writes_reports_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.ini"), SMALL).unwrap();
    let out = loadsim(
        &["run", "--scenario", "s.ini", "--out", "res", "--trace"],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("crossover multiagent vs af"), "{stdout}");

    let csv = std::fs::read_to_string(dir.path().join("res/results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "policy,m,replicates,mean_Tp,std_Tp,mean_Cp,std_Cp,max_inbound_mean,idle_frac_mean"
    );
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[1].starts_with("af,2,2,") && lines[4].starts_with("multiagent,4,2,"));

    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("res/results.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(json["results"].as_array().unwrap().len(), 4);

    let traces = std::fs::read_dir(dir.path().join("res/trace"))
        .unwrap()
        .count();
    assert_eq!(traces, 8);
    let trace =
        std::fs::read_to_string(dir.path().join("res/trace/multiagent-m4-r1.jsonl")).unwrap();
    for line in trace.lines() {
        let ev: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(ev["time"].is_u64() && ev["kind"].is_string());
    }
}

#[test]
fn flags_override_the_scenario() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.ini"), SMALL).unwrap();
    let out = loadsim(
        &[
            "explain",
            "--scenario",
            "s.ini",
            "--seed",
            "42",
            "--policy",
            "static",
            "--policy",
            "fac",
            "--m",
            "3",
            "--replicates",
            "1",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for line in [
        "seed = 42",
        "policies = static,fac",
        "m = 3",
        "replicates = 1",
        "particles = 61",
    ] {
        assert!(
            text.lines().any(|l| l == line),
            "missing {line:?} in\n{text}"
        );
    }

    let out = loadsim(
        &[
            "run",
            "--scenario",
            "s.ini",
            "--m",
            "2",
            "--policy",
            "static",
            "--replicates",
            "1",
            "--out",
            "one",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("one/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn parse_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.ini"),
        "workload = qtm\npolicy = nosuch\n",
    )
    .unwrap();
    let out = loadsim(&["run", "--scenario", "bad.ini"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(
        err.contains("line 2") && err.contains("multiagent"),
        "{err}"
    );

    let out = loadsim(&["run", "--replicates", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_loadsim"))
        .args(["explain"])
        .env("LOADSIM_WORKERS", "lots")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "explain does not read the worker count"
    );
    let out = Command::new(env!("CARGO_BIN_EXE_loadsim"))
        .args(["run", "--scenario", "bad.ini"])
        .current_dir(dir.path())
        .env("LOADSIM_WORKERS", "lots")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_subcommand_reports_no_violations() {
    let dir = tempfile::tempdir().unwrap();
    let out = loadsim(
        &["oracle", "--count", "60", "--max-items", "8", "--out", "o"],
        dir.path(),
    );
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .contains("0 violations"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/oracle.json")).unwrap())
            .unwrap();
    assert_eq!(json.as_array().unwrap().len(), 60);

    let out = loadsim(&["oracle", "--max-items", "20"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}
