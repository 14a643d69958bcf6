use std::fs;
use std::process::{Command, Output};

use laissez_core::report::summarize;
use laissez_core::trace::parse_trace;

fn laissez(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_laissez")).args(args).output().expect("spawn laissez")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_a_trace_and_report_reproduces_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("laissez.csv");
    let out = laissez(&["run", "laissez", "--trace", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# laissez-trace schema=1 scenario=laissez hash="));
    let mut lines = text.lines().skip(1);
    assert_eq!(lines.next(), Some("time_ms,event,tenant,accel,instance,rate_usd_per_hr,progress,cumulative_cost_usd"));
    assert!(lines.next().unwrap().starts_with("0,request_arrival,B,"));

    let trace = parse_trace(text.as_bytes()).unwrap();
    let report = laissez(&["report", path.to_str().unwrap()]);
    assert_eq!(report.status.code(), Some(0), "{}", stderr(&report));
    assert_eq!(stdout(&report), format!("{}\n", summarize(&trace)));
    assert!(stdout(&report).contains("revenue_usd 0.375286"));
}

#[test]
fn jsonl_trace_to_stdout() {
    let out = laissez(&["run", "static-first-come", "--trace", "-", "--format", "jsonl"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let trace = parse_trace(text.as_bytes()).unwrap();
    assert_eq!(trace.header.scenario, "static-first-come");
    assert_eq!(text.lines().count(), trace.records.len() + 1);
}

#[test]
fn validate_reports_the_location_of_a_syntax_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.scenario");
    fs::write(&path, "schema_version = 1\nname = \"x\"\n[cluster\n").unwrap();
    let out = laissez(&["validate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn validate_reports_the_field_path_of_a_semantic_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.scenario");
    let text = laissez_core::scenario::bundled_text("laissez").unwrap().replace("\"checkpoint-aware\"", "\"psychic\"");
    fs::write(&path, text).unwrap();
    let out = laissez(&["validate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("tenants[0].strategy"), "{}", stderr(&out));
}

#[test]
fn validate_accepts_bundled_scenarios() {
    let out = laissez(&["validate", "naive-migration"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).starts_with("ok: naive-migration"));
}

#[test]
fn scenarios_lists_every_bundled_name() {
    let out = laissez(&["scenarios"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    for name in ["static-first-come", "static-b-first", "naive-migration", "laissez"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name} missing");
    }
    let printed = laissez(&["scenarios", "--print", "laissez"]);
    assert_eq!(stdout(&printed), laissez_core::scenario::bundled_text("laissez").unwrap());
}

#[test]
fn horizon_before_quiescence_exits_three() {
    let out = laissez(&["run", "laissez", "--until", "10m"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("still live"));
}

#[test]
fn missing_input_exits_two() {
    let out = laissez(&["run", "/nonexistent/dir/x.scenario"]);
    assert_eq!(out.status.code(), Some(2));
    let out = laissez(&["report", "/nonexistent/trace.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    let out = laissez(&["run"]);
    assert_eq!(out.status.code(), Some(1));
    let out = laissez(&["run", "laissez", "--format", "xml"]);
    assert_eq!(out.status.code(), Some(1));
}
