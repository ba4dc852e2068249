use std::path::Path;
use std::process::{Command, Output};

fn autoduct(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autoduct"))
        .args(args)
        .current_dir(dir)
        .env_remove("AUTODUCT_API_KEY")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = autoduct(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn version_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok(dir.path(), &["--version"]);
    assert!(v.starts_with("autoduct ") && v.contains("model format v1"));
    assert_eq!(code(&autoduct(dir.path(), &["--help"])), 0);
    assert_eq!(code(&autoduct(dir.path(), &["bogus"])), 1);
    assert_eq!(code(&autoduct(dir.path(), &[])), 1);
    let out = autoduct(dir.path(), &["data", "split", "--data", "x.csv", "--fracs", "0.5,0.5,0.5", "--out-dir", "o"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn data_gen_split_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["data", "gen", "--n", "1000", "--seed", "4", "--out", "d.csv"]);
    assert_eq!(code(&autoduct(d, &["data", "validate", "--data", "d.csv"])), 0);
    let out = ok(d, &["data", "split", "--data", "d.csv", "--out-dir", "sp"]);
    assert!(out.contains("train: 720 rows") && out.contains("validation: 180 rows") && out.contains("test: 100 rows"));
    for name in ["train", "validation", "test"] {
        assert!(d.join("sp").join(format!("{name}.csv")).exists());
    }

    // One pressure far outside the reference range.
    let text = std::fs::read_to_string(d.join("d.csv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cols: Vec<String> = lines[1].split(',').map(String::from).collect();
    cols[2] = "90000".into();
    lines[1] = cols.join(",");
    std::fs::write(d.join("bad.csv"), lines.join("\n") + "\n").unwrap();
    let out = autoduct(d, &["data", "validate", "--data", "bad.csv", "--json"]);
    assert_eq!(code(&out), 2);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v.is_object());

    ok(d, &["data", "slices", "--points", "11", "--out", "s.json"]);
    let specs: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(d.join("s.json")).unwrap()).unwrap();
    assert_eq!(specs.len(), 8);
}

#[test]
fn tune_train_evaluate_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["data", "gen", "--n", "600", "--seed", "1", "--out", "d.csv"]);
    let tune = |out: &str| {
        ok(d, &[
            "tune", "--data", "d.csv", "--runs", "2", "--sobol", "3", "--bo", "2", "--top-k", "3", "--candidates", "64",
            "--epochs", "4", "--out", out,
        ])
    };
    tune("t1");
    tune("t2");
    for f in ["trials.jsonl", "top_k.json"] {
        assert_eq!(std::fs::read(d.join("t1").join(f)).unwrap(), std::fs::read(d.join("t2").join(f)).unwrap(), "{f}");
    }
    let trials = std::fs::read_to_string(d.join("t1/trials.jsonl")).unwrap();
    assert_eq!(trials.lines().count(), 10);
    assert_eq!(std::fs::read_to_string(d.join("t1/trial_timings.csv")).unwrap().lines().count(), 11);

    // Sobol-only budget.
    ok(d, &["tune", "--data", "d.csv", "--runs", "1", "--sobol", "4", "--bo", "0", "--top-k", "2", "--epochs", "2", "--out", "t3"]);
    let t3 = std::fs::read_to_string(d.join("t3/trials.jsonl")).unwrap();
    assert!(t3.lines().all(|l| l.contains("\"origin\":\"sobol\"")));

    ok(d, &["train", "--data", "d.csv", "--manifest", "t1/top_k.json", "--epochs", "5", "--out", "ens"]);
    for out in ["e1", "e2"] {
        ok(d, &["evaluate", "--ensemble", "ens", "--data", "d.csv", "--standard-slices", "--slice-points", "11", "--out", out]);
    }
    let mut names: Vec<_> = std::fs::read_dir(d.join("e1")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 8 + 5);
    for n in &names {
        assert_eq!(std::fs::read(d.join("e1").join(n)).unwrap(), std::fs::read(d.join("e2").join(n)).unwrap(), "{n:?}");
    }
    let metrics: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(d.join("e1/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.len(), 3);
}

#[test]
fn agent_fault_resume_and_refusals() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let base = ["agent", "--workspace", "ws", "--synthetic-n", "300", "--size", "1", "--epochs", "4"];
    let mut args = base.to_vec();
    args.extend(["--inject-fault", "stage=evaluate,attempt=all"]);
    assert_eq!(code(&autoduct(d, &args)), 1);
    assert_eq!(code(&autoduct(d, &base)), 1, "existing workspace needs --resume");

    let out = ok(d, &["agent", "--workspace", "ws", "--resume"]);
    assert!(out.contains("status: completed"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ws/report.json")).unwrap()).unwrap();
    assert_eq!(report["error_count"], 3);
    assert_eq!(report["completed"], true);

    assert_eq!(code(&autoduct(d, &["agent", "--workspace", "fresh", "--resume"])), 1);
    let out = autoduct(d, &["agent", "--workspace", "llm", "--planner", "llm", "--endpoint", "http://127.0.0.1:9", "--synthetic-n", "50"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("AUTODUCT_API_KEY"));
    assert!(!d.join("llm").exists());
    // There is no flag that accepts a key.
    assert_eq!(code(&autoduct(d, &["agent", "--workspace", "k", "--api-key", "x"])), 1);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{"epochs": 2, "unknown": 1}"#).unwrap();
    assert_eq!(code(&autoduct(d, &["--config", "bad.json", "agent", "--workspace", "w"])), 1);
    std::fs::write(
        d.join("c.json"),
        r#"{"synthetic": {"n": 250, "seed": 3}, "ensemble_size": 1, "epochs": 3, "mode": "react"}"#,
    )
    .unwrap();
    let out = ok(d, &["--config", "c.json", "agent", "--workspace", "w", "--mode", "direct"]);
    assert!(out.contains("(direct, planner direct)"));
}

#[test]
fn trials_write_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(d, &[
        "trials", "--root", "tr", "--n", "2", "--synthetic-n", "250", "--size", "1", "--epochs", "3", "--fault-trials", "1",
    ]);
    assert!(out.contains("trial 01: completed errors=1"));
    let table = std::fs::read_to_string(d.join("tr/robustness.txt")).unwrap();
    assert!(table.contains("Completed with one error"));
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("tr/stats.json")).unwrap()).unwrap();
    assert_eq!(stats["completed_with_one_error"], 1);
    assert_eq!(code(&autoduct(d, &["trials", "--root", "tr2", "--n", "2", "--synthetic-n", "50", "--fault-trials", "5"])), 1);
}
