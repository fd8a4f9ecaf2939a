//! The command-line tools, run as separate processes.

use std::io::{BufRead, BufReader};
use std::process::{Child, Command, Stdio};

use nexus::harness::RunReport;
use nexus::proto::parse_trace;

const HARNESS: &str = env!("CARGO_BIN_EXE_harness");
const STORE: &str = env!("CARGO_BIN_EXE_store");
const BACKEND: &str = env!("CARGO_BIN_EXE_backend");

fn run(args: &[&str]) -> String {
    let out = Command::new(HARNESS).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

struct Daemon(Child);

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Starts a daemon and returns it with the address from its first line.
fn daemon(exe: &str, args: &[&str]) -> (Daemon, String) {
    let mut child = Command::new(exe).args(args).stdout(Stdio::piped()).stderr(Stdio::null()).spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().rsplit(' ').next().unwrap().to_string();
    assert!(line.contains("listening on"), "{line}");
    (Daemon(child), addr)
}

#[test]
fn gen_trace_is_seeded() {
    let args = ["gen-trace", "--functions", "3", "--rate", "50", "--io-ratio", "0.7", "--seed", "4", "--events", "40"];
    let a = run(&args);
    assert_eq!(a, run(&args));
    let evs = parse_trace(&a).unwrap();
    assert_eq!(evs.len(), 40);
    assert!(evs.windows(2).all(|w| w[0].t_ms <= w[1].t_ms));
    assert!(evs.iter().all(|e| ["fn000", "fn001", "fn002"].contains(&e.function.as_str())));
    assert_ne!(a, run(&["gen-trace", "--functions", "3", "--rate", "50", "--seed", "5", "--events", "40"]));
}

#[test]
fn embedded_replay_writes_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let report = dir.path().join("r.json");
    let gen = ["gen-trace", "--functions", "2", "--events", "12", "--rate", "40", "--out"];
    run(&[&gen[..], &[trace.to_str().unwrap()]].concat());
    for mode in ["coupled", "offloaded", "offloaded-async"] {
        let out = run(&["replay", "--trace", trace.to_str().unwrap(), "--mode", mode, "--report", report.to_str().unwrap()]);
        assert!(out.starts_with("12 invocations, 0 errors"), "{mode}: {out}");
        let r: RunReport = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
        assert_eq!(r.mode.to_string(), mode);
        assert_eq!((r.invocations.len(), r.errors), (12, 0));
        let csv = std::fs::read_to_string(report.with_extension("csv")).unwrap();
        assert_eq!(csv.lines().count(), 13);
    }
}

#[test]
fn replay_against_separate_store_and_backend() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    run(&["gen-trace", "--functions", "2", "--events", "10", "--rate", "40", "--out", trace.to_str().unwrap()]);
    let config = dir.path().join("backend.json");
    std::fs::write(&config, r#"{"functions": [{"name": "fn000"}, {"name": "fn001"}]}"#).unwrap();
    let regions = dir.path().join("regions");
    std::fs::create_dir(&regions).unwrap();

    let (_store, store_addr) = daemon(STORE, &["--listen", "127.0.0.1:0"]);
    let (_backend, ingress) = daemon(
        BACKEND,
        &[
            "--config",
            config.to_str().unwrap(),
            "--listen-ingress",
            "127.0.0.1:0",
            "--store",
            &store_addr,
            "--region-dir",
            regions.to_str().unwrap(),
        ],
    );
    let report = dir.path().join("r.json");
    let out = run(&[
        "replay",
        "--trace",
        trace.to_str().unwrap(),
        "--mode",
        "offloaded-async",
        "--report",
        report.to_str().unwrap(),
        "--ingress",
        &ingress,
        "--store",
        &store_addr,
    ]);
    assert!(out.starts_with("10 invocations, 0 errors"), "{out}");
    let r: RunReport = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r.counters.backend.invocations, 10);
    assert_eq!(r.counters.backend.responses_ok, 10);
}

#[test]
fn sweep_reads_a_template() {
    let dir = tempfile::tempdir().unwrap();
    let template = dir.path().join("t.json");
    std::fs::write(
        &template,
        r#"{"per_function_rate": 4.0, "duration_s": 0.3, "start": 1, "step": 1, "max_functions": 2,
            "unloaded_samples": 2, "modes": ["offloaded"],
            "backend": {"restore": {"base_us": 2000, "per_page_us": 0}}}"#,
    )
    .unwrap();
    let out = dir.path().join("s.json");
    let text = run(&["sweep", "--template", template.to_str().unwrap(), "--slo", "inf", "--out", out.to_str().unwrap()]);
    assert!(text.contains("offloaded") && text.contains("density 2"), "{text}");
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(v[0]["density"], 2);
}

#[test]
fn bad_arguments_fail() {
    let out = Command::new(HARNESS).args(["replay", "--mode", "sideways"]).output().unwrap();
    assert!(!out.status.success());
    let out = Command::new(HARNESS).args(["gen-trace", "--functions", "0"]).output().unwrap();
    assert!(!out.status.success());
}
