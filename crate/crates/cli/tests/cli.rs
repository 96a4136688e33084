use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn firstprune(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_firstprune"))
        .arg("--config")
        .arg(data("sim_config.json"))
        .arg("--dataset")
        .arg(data("questions.jsonl"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("json summary")
}

fn stderr_error(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("json error line");
    serde_json::from_str(line).unwrap()
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn pipeline_baseline_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let s = stdout_json(&firstprune(&run, &["pipeline"]));
    assert_eq!(s["completed"], 6);
    assert_eq!(s["run_id"].as_str().unwrap().len(), 16);
    stdout_json(&firstprune(&run, &["baseline"]));
    let r = stdout_json(&firstprune(&run, &["report", "--format", "md,csv"]));
    let ratio = r["token_ratio"].as_f64().unwrap();
    assert!(ratio > 0.0 && ratio < 1.0, "{ratio}");
    let csv = read(run.join("report/report.csv"));
    assert!(csv.starts_with("method,set-a,set-b,Average,token_ratio,wall_time_ratio\n"));
    assert_eq!(csv.lines().count(), 4);
    assert!(run.join("report/report.md").exists());
    assert!(!run.join("report/plotdata.json").exists());
}

#[test]
fn phase_commands_compose_into_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (stepwise, whole) = (dir.path().join("a"), dir.path().join("b"));
    for cmd in ["sample", "score", "prune"] {
        stdout_json(&firstprune(&stepwise, &[cmd]));
    }
    assert!(read(stepwise.join("records.jsonl")).is_empty());
    assert_eq!(read(stepwise.join("selections.jsonl")).lines().count(), 6);
    stdout_json(&firstprune(&stepwise, &["continue"]));
    stdout_json(&firstprune(&whole, &["pipeline", "--workers", "3"]));
    for f in ["candidates.jsonl", "scores.jsonl", "selections.jsonl", "records.jsonl", "budgets.jsonl"] {
        assert_eq!(read(stepwise.join(f)), read(whole.join(f)), "{f}");
    }
}

#[test]
fn invalid_settings_fail_with_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = firstprune(&dir.path().join("run"), &["--n", "4", "--m", "8", "pipeline"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_error(&o)["error"]["kind"], "config");

    let o = Command::new(env!("CARGO_BIN_EXE_firstprune"))
        .args(["--out-dir"])
        .arg(dir.path())
        .arg("pipeline")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_error(&o)["error"]["message"].as_str().unwrap().contains("--dataset"));
}

#[test]
fn resume_into_a_different_run_is_refused_and_logged() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    stdout_json(&firstprune(&run, &["sample"]));
    let o = firstprune(&run, &["--seed", "99", "sample"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_error(&o)["error"]["kind"], "store");
    let errors = read(run.join("errors.jsonl"));
    assert!(errors.contains("\"kind\":\"store\""), "{errors}");

    stdout_json(&firstprune(&run, &["--seed", "99", "--no-resume", "sample"]));
    let superseded = std::fs::read_dir(&run)
        .unwrap()
        .filter_map(Result::ok)
        .any(|e| e.file_name().to_string_lossy().starts_with("superseded-"));
    assert!(superseded);
}

#[test]
fn keyword_frequencies_over_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    stdout_json(&firstprune(&run, &["baseline"]));
    let s = stdout_json(&firstprune(&run, &["keyword-freq", "--markers", "alternatively,zzz"]));
    assert_eq!(s["traces"], 48);
    let rows = s["per_trace_frequency"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["mean_count"], 0.0);
}
