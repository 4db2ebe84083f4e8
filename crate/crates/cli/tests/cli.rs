use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn dualkv(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualkv")).args(args).current_dir(dir).output().expect("binary runs")
}

const TINY_CONFIG: &str = "num_layers = 1\nhidden = 32\nnum_heads = 2\nnum_kv_heads = 2\nhead_dim = 8\nffn_hidden = 64\nvocab = 64\nrank = 4\nblock_capacity = 4\npool_budget_bytes = 1048576\n";

fn gen(dir: &Path, name: &str, pattern: &str, seed: &str) -> Output {
    dualkv(
        &[
            "gen-trace",
            "--pattern",
            pattern,
            "--workflows",
            "2",
            "--agents",
            "3",
            "--ctx-tokens",
            "24",
            "--dyn-tokens",
            "6",
            "--seed",
            seed,
            "--max-new-tokens",
            "3",
            "--out",
            name,
        ],
        dir,
    )
}

#[test]
fn gen_trace_is_byte_deterministic() {
    let dir = TempDir::new().unwrap();
    for name in ["a.jsonl", "b.jsonl"] {
        assert!(gen(dir.path(), name, "react", "7").status.success());
    }
    assert!(gen(dir.path(), "c.jsonl", "react", "8").status.success());
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
    // Meta line plus one record per agent.
    assert_eq!(String::from_utf8(read("a.jsonl")).unwrap().lines().count(), 7);
}

#[test]
fn run_writes_outputs_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("cfg.toml"), TINY_CONFIG).unwrap();
    assert!(gen(dir.path(), "t.jsonl", "mapreduce", "1").status.success());
    for out in ["o1", "o2"] {
        let o = dualkv(&["run", "--trace", "t.jsonl", "--config", "cfg.toml", "--mode", "all", "--out", out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for mode in ["unified", "disaggregated", "full_reuse"] {
        for file in ["metrics.json", "timeline.csv"] {
            let a = fs::read(dir.path().join("o1").join(mode).join(file)).unwrap();
            let b = fs::read(dir.path().join("o2").join(mode).join(file)).unwrap();
            assert_eq!(a, b, "{mode}/{file}");
        }
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("o1/report.json")).unwrap()).unwrap();
    assert!(report["ratios"]["throughput"].as_f64().unwrap() > 0.0);
    assert_eq!(report["modes"].as_object().unwrap().len(), 3);
    assert_eq!(fs::read(dir.path().join("o1/report.json")).unwrap(), fs::read(dir.path().join("o2/report.json")).unwrap());
}

#[test]
fn single_mode_writes_into_out_dir() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("cfg.toml"), TINY_CONFIG).unwrap();
    assert!(gen(dir.path(), "t.jsonl", "react", "2").status.success());
    let o = dualkv(&["run", "--trace", "t.jsonl", "--config", "cfg.toml", "--mode", "disaggregated", "--out", "o"], dir.path());
    assert!(o.status.success());
    for f in ["metrics.json", "timeline.csv", "report.json"] {
        assert!(dir.path().join("o").join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("o/report.json")).unwrap()).unwrap();
    assert!(report["ratios"].is_null());
}

#[test]
fn empty_trace_gives_empty_report() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("t.jsonl"), "").unwrap();
    let o = dualkv(&["run", "--trace", "t.jsonl", "--mode", "unified", "--out", "o"], dir.path());
    assert!(o.status.success());
    let m: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("o/metrics.json")).unwrap()).unwrap();
    assert_eq!(m["completed_agents"], 0);
}

#[test]
fn corrupted_line_is_rejected_with_its_number() {
    let dir = TempDir::new().unwrap();
    assert!(gen(dir.path(), "t.jsonl", "react", "3").status.success());
    let mut text = fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    text.push_str("{\"time\": \"soon\"}\n");
    fs::write(dir.path().join("t.jsonl"), text).unwrap();
    let o = dualkv(&["run", "--trace", "t.jsonl", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 8"), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn validation_failures_exit_with_one() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("bad.toml"), "no_such_key = 3\n").unwrap();
    assert!(gen(dir.path(), "t.jsonl", "react", "4").status.success());
    let cases: [&[&str]; 4] = [
        &["run", "--trace", "t.jsonl", "--config", "bad.toml", "--out", "o"],
        &["run", "--trace", "t.jsonl", "--mode", "sideways", "--out", "o"],
        &["run", "--trace", "missing.jsonl", "--out", "o"],
        &["gen-trace", "--workflows", "0"],
    ];
    for args in cases {
        assert_eq!(dualkv(args, dir.path()).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn verify_radix_suite_passes() {
    let dir = TempDir::new().unwrap();
    let o = dualkv(&["verify", "--suite", "radix"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("[PASS] radix_lcp: 1000 cases"), "{out}");
    assert!(out.contains("0 failed"));
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    assert_eq!(dualkv(&["verify", "--suite", "everything"], dir.path()).status.code(), Some(1));
}
