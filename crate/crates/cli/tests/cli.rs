use std::path::Path;
use std::process::{Command, Output};

fn driftwatch(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_driftwatch"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn only_trace(dir: &Path) -> std::path::PathBuf {
    let mut traces: Vec<_> = std::fs::read_dir(dir.join("o/traces"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.to_string_lossy().ends_with(".replay.jsonl"))
        .collect();
    assert_eq!(traces.len(), 1);
    traces.pop().unwrap()
}

#[test]
fn run_replay_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = driftwatch(d, &["--out", "o", "run", "--tasks", "sql,rag", "--temps", "0.0", "--conc", "1,4", "--trials", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("(12 runs)"));
    let csv = std::fs::read_to_string(d.join("o/reports/conditions.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().skip(1).all(|l| l.contains(",100.000,")));

    let trace = only_trace(d);
    let o = driftwatch(d, &["--out", "o", "replay", "--trace", trace.to_str().unwrap(), "--endpoint", "mock-deterministic"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("12 matched, 0 mismatched"));

    std::fs::remove_file(d.join("o/reports/conditions.csv")).unwrap();
    let o = driftwatch(d, &["--out", "o", "report", "--traces", "o/traces/*.jsonl"]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(d.join("o/reports/conditions.csv")).unwrap(), csv);
}

#[test]
fn tampered_trace_fails_replay_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(driftwatch(d, &["--out", "o", "run", "--tasks", "sql", "--temps", "0", "--conc", "1", "--trials", "2"]).status.success());
    let trace = only_trace(d);
    let text = std::fs::read_to_string(&trace).unwrap();
    let first = text.lines().next().unwrap();
    let mut rec: serde_json::Value = serde_json::from_str(first).unwrap();
    let run_id = rec["run_id"].as_str().unwrap().to_string();
    let resp = rec["response"].as_str().unwrap().replacen("SUM", "SUn", 1);
    rec["response"] = resp.into();
    let tampered = text.replacen(first, &serde_json::to_string(&rec).unwrap(), 1);
    let copy = d.join("tampered.jsonl");
    std::fs::write(&copy, tampered).unwrap();
    let o = driftwatch(d, &["--out", "o", "replay", "--trace", copy.to_str().unwrap(), "--endpoint", "mock-deterministic"]);
    assert_eq!(o.status.code(), Some(2));
    let out = stdout(&o);
    assert!(out.contains(&format!("mismatch {run_id}")), "{out}");
    assert_eq!(out.matches("mismatch ").count(), 1);
}

#[test]
fn config_errors_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(driftwatch(d, &["--config", "missing.json", "run"]).status.code(), Some(4));
    std::fs::write(d.join("bad.json"), r#"{"temperatures": [-1.0]}"#).unwrap();
    assert_eq!(driftwatch(d, &["--config", "bad.json", "--out", "o", "run"]).status.code(), Some(4));
    assert_eq!(driftwatch(d, &["--out", "o", "replay", "--trace", "x.jsonl", "--endpoint", "nobody"]).status.code(), Some(4));
    assert_eq!(driftwatch(d, &["--out", "o", "report", "--traces", "none/*.jsonl"]).status.code(), Some(4));
    assert_eq!(driftwatch(d, &["--out", "o", "sweep", "--temps", "0.2"]).status.code(), Some(4));
}

#[test]
fn unreachable_provider_in_strict_mode_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = r#"{
        "endpoints": [{"name": "dead", "kind": "ollama_compatible", "base_url": "http://127.0.0.1:9", "model_id": "m", "timeout_ms": 500}],
        "tasks": ["sql"], "temperatures": [0.0], "concurrencies": [1], "trials_per_condition": 1,
        "max_retries": 0, "strict": true
    }"#;
    std::fs::write(d.join("cfg.json"), cfg).unwrap();
    let o = driftwatch(d, &["--config", "cfg.json", "--out", "o", "run"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn credentials_stay_out_of_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = r#"{
        "endpoints": [{"name": "wx", "kind": "watsonx_style", "base_url": "http://127.0.0.1:9", "model_id": "m",
                       "credential_env": "DW_TEST_TOKEN", "timeout_ms": 500}],
        "tasks": ["sql"], "temperatures": [0.0], "concurrencies": [1], "trials_per_condition": 1, "max_retries": 0
    }"#;
    std::fs::write(d.join("cfg.json"), cfg).unwrap();
    let secret = "s3cr3t-token-value";
    let o = Command::new(env!("CARGO_BIN_EXE_driftwatch"))
        .current_dir(d)
        .env("DW_TEST_TOKEN", secret)
        .args(["--config", "cfg.json", "--out", "o", "run"])
        .output()
        .unwrap();
    assert!(!String::from_utf8_lossy(&o.stdout).contains(secret));
    assert!(!String::from_utf8_lossy(&o.stderr).contains(secret));
    for sub in ["traces", "manifests", "reports"] {
        let Ok(entries) = std::fs::read_dir(d.join("o").join(sub)) else { continue };
        for e in entries {
            let body = std::fs::read_to_string(e.unwrap().path()).unwrap();
            assert!(!body.contains(secret));
        }
    }
}

#[test]
fn fixture_and_probe() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let a = driftwatch(d, &["gen-fixture", "--path", "a.sqlite"]);
    let b = driftwatch(d, &["gen-fixture", "--path", "b.sqlite"]);
    assert!(a.status.success() && b.status.success());
    let hash = |o: &Output| stdout(o).split("sha256=").nth(1).unwrap().trim().to_string();
    assert_eq!(hash(&a), hash(&b));
    assert_eq!(driftwatch(d, &["gen-fixture", "--path", "c.sqlite", "--rows", "0"]).status.code(), Some(4));

    let o = driftwatch(d, &["--out", "o", "probe-ordering", "--permutations", "25"]);
    assert!(o.status.success());
    assert!(!stdout(&o).contains("FAIL"));
}
