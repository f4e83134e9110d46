use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use specvm::session::SessionSummary;
use specvm::trace::parse_trace;

fn svm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svm"))
        .args(args)
        .current_dir(dir)
        .env_remove("SVM_SEED")
        .output()
        .expect("spawn svm")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Emits gadget `id` as `g.sasm`, `t.bin` and `s.bin`.
fn gadget(dir: &Path, id: u32) {
    let o = svm(dir, &["gadgets", "emit", &id.to_string(), "-o", "g.sasm", "--trigger", "t.bin", "--safe", "s.bin"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn run_strict_and_safe() {
    let d = tempfile::tempdir().unwrap();
    gadget(d.path(), 1);
    let o = svm(d.path(), &["run", "g.sasm", "--input", "t.bin", "--strict"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stdout(&o).lines().count(), 1);
    assert!(stdout(&o).contains("\"kind\":\"DATA-OOB\""));

    let o = svm(d.path(), &["run", "g.sasm", "--input", "t.bin"]);
    assert_eq!(o.status.code(), Some(0));

    let o = svm(d.path(), &["run", "g.sasm", "--input", "s.bin", "--strict", "--print-layout"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("heap "));

    let o = svm(d.path(), &["run", "g.sasm", "--input", "t.bin", "--no-spec", "--strict"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn run_trace_file_has_header() {
    let d = tempfile::tempdir().unwrap();
    gadget(d.path(), 1);
    let o = svm(d.path(), &["run", "g.sasm", "--input", "t.bin", "--trace", "r.jsonl"]);
    assert!(o.status.success());
    let t = parse_trace(&fs::read_to_string(d.path().join("r.jsonl")).unwrap());
    assert!(t.header.is_some());
    assert_eq!(t.records.len(), 1);
    assert!(t.errors.is_empty());
}

#[test]
fn architectural_fault_is_a_crash() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.sasm"), "fn main:\nentry:\n  const r1, 999999999\n  load r2, r1, 0\n  halt\n").unwrap();
    let o = svm(d.path(), &["run", "c.sasm"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("error[crash]"));
}

#[test]
fn usage_and_input_errors() {
    let d = tempfile::tempdir().unwrap();
    let o = svm(d.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("svm: error[usage]:"));

    let o = svm(d.path(), &["run", "missing.sasm"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("svm: error[io]:"));

    fs::write(d.path().join("bad.sasm"), "fn main:\nentry:\n  bogus r1\n").unwrap();
    let o = svm(d.path(), &["asm", "bad.sasm"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("svm: error[parse]:"));
    assert_eq!(stderr(&o).lines().next().unwrap().matches('\n').count(), 0);

    let o = svm(d.path(), &["gadgets", "emit", "99"]);
    assert_eq!(o.status.code(), Some(1));

    gadget(d.path(), 1);
    let o = svm(d.path(), &["run", "g.sasm", "--window", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("svm: error[config]:"));
}

#[test]
fn asm_round_trips() {
    let d = tempfile::tempdir().unwrap();
    gadget(d.path(), 7);
    let o = svm(d.path(), &["asm", "g.sasm", "-o", "a.sasm"]);
    assert!(o.status.success());
    let o = svm(d.path(), &["asm", "a.sasm"]);
    assert_eq!(stdout(&o), fs::read_to_string(d.path().join("a.sasm")).unwrap());
}

#[test]
fn gadgets_list() {
    let d = tempfile::tempdir().unwrap();
    let o = svm(d.path(), &["gadgets", "list"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 20);
}

#[test]
fn config_precedence() {
    let d = tempfile::tempdir().unwrap();
    gadget(d.path(), 1);
    fs::write(d.path().join("svm.conf"), "# campaign\nseed = 5\nruns = 50\n").unwrap();
    let seed_of = |extra: &[&str], env: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_svm"));
        cmd.current_dir(d.path()).env_remove("SVM_SEED");
        if let Some(v) = env {
            cmd.env("SVM_SEED", v);
        }
        let o = cmd.args(["--config", "svm.conf", "fuzz", "g.sasm", "--out", out]).args(extra).output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let s = SessionSummary::load(&d.path().join(out).join("session.json")).unwrap();
        assert_eq!(s.runs, 50);
        s.seed
    };
    assert_eq!(seed_of(&[], None, "a"), 5);
    assert_eq!(seed_of(&[], Some("9"), "b"), 9);
    assert_eq!(seed_of(&["--seed", "11"], Some("9"), "c"), 11);

    fs::write(d.path().join("bad.conf"), "seed = many\n").unwrap();
    let o = svm(d.path(), &["--config", "bad.conf", "fuzz", "g.sasm"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error[config]"));
}

#[test]
fn fuzz_default_paths() {
    let d = tempfile::tempdir().unwrap();
    gadget(d.path(), 1);
    let o = svm(d.path(), &["fuzz", "g.sasm", "--seeds", "s.bin", "--runs", "200", "--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for p in ["corpus", "trace.jsonl", "session.json"] {
        assert!(d.path().join(p).exists(), "{p}");
    }
    let first = fs::read_to_string(d.path().join("trace.jsonl")).unwrap();
    assert!(first.starts_with("{\"svm_header\":"));
}

#[test]
fn pipeline_through_the_cli() {
    let d = tempfile::tempdir().unwrap();
    gadget(d.path(), 20);
    let o = svm(d.path(), &["fuzz", "g.sasm", "--seeds", "t.bin", "--seeds", "s.bin", "--runs", "1500", "--out", "f"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = svm(d.path(), &["analyze", "f/trace.jsonl", "-o", "report.json", "--whitelist", "w.txt", "--program", "g.sasm"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let wl = fs::read_to_string(d.path().join("w.txt")).unwrap();
    assert!(wl.starts_with("# svm_header "));
    assert!(wl.lines().any(|l| l == "main:mid:3"), "{wl}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("report.json")).unwrap()).unwrap();
    assert!(report["svm_header"]["version"].is_string());
    assert!(!report["findings"].as_array().unwrap().is_empty());
    let txt = fs::read_to_string(d.path().join("report.txt")).unwrap();
    assert!(txt.starts_with("# svm_header "));
    assert!(txt.contains("UNCONTROLLED"));

    for mode in ["fence", "slh"] {
        let out = format!("h-{mode}.sasm");
        let o = svm(d.path(), &["harden", "g.sasm", "--mode", mode, "--whitelist", "w.txt", "-o", &out]);
        assert!(o.status.success(), "{}", stderr(&o));
        let s: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        assert_eq!(s["whitelisted"], 1);
        assert_eq!(s["instrumented"], s["total"].as_u64().unwrap() - 1);
        assert!(fs::read_to_string(d.path().join(&out)).unwrap().starts_with("; svm_header "));

        let o = svm(d.path(), &["verify", &out, "--corpus", "f/corpus", "--strict"]);
        assert_eq!(o.status.code(), Some(0), "{mode}: {}", stdout(&o));
        let o = svm(d.path(), &["verify", &out, "--corpus", "f/corpus", "--against", "uninstrumented", "--strict"]);
        assert_eq!(o.status.code(), Some(3), "{mode}: whitelisted finding should survive");
    }
}

#[test]
fn malformed_trace_gives_partial_exit() {
    let d = tempfile::tempdir().unwrap();
    gadget(d.path(), 1);
    assert!(svm(d.path(), &["run", "g.sasm", "--input", "t.bin", "--trace", "r.jsonl"]).status.success());
    let mut text = fs::read_to_string(d.path().join("r.jsonl")).unwrap();
    text.push_str("{\"kind\": 3}\n");
    fs::write(d.path().join("r.jsonl"), text).unwrap();
    let o = svm(d.path(), &["analyze", "r.jsonl"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("r.jsonl:3"));
    assert!(stdout(&o).contains("DATA-OOB"));
}

#[test]
fn slh_rejects_reserved_registers() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("r.sasm"), "fn main:\nentry:\n  const r15, 1\n  halt\n").unwrap();
    let o = svm(d.path(), &["harden", "r.sasm", "--mode", "slh"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error[mask-register-in-use]"));
    let o = svm(d.path(), &["harden", "r.sasm", "--mode", "fence"]);
    assert!(o.status.success());
}

#[test]
fn oracle_matches_run_on_gadget() {
    let d = tempfile::tempdir().unwrap();
    gadget(d.path(), 1);
    let o = svm(d.path(), &["oracle", "g.sasm", "--input", "t.bin"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = svm(d.path(), &["run", "g.sasm", "--input", "t.bin", "--max-order", "1"]);
    assert_eq!(stdout(&o).replace("\"run\":0", "\"run\":1"), stdout(&r));
}

#[test]
fn parallel_workers_complete() {
    let d = tempfile::tempdir().unwrap();
    gadget(d.path(), 1);
    let o = svm(d.path(), &["fuzz", "g.sasm", "--seeds", "s.bin", "--runs", "2000", "--workers", "4", "--out", "p"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = SessionSummary::load(&d.path().join("p/session.json")).unwrap();
    assert_eq!(s.runs, 2000);
    assert!(s.records > 0);
    let t = parse_trace(&fs::read_to_string(d.path().join("p/trace.jsonl")).unwrap());
    assert!(t.errors.is_empty());
    assert_eq!(t.records.len() as u64, s.records);
}
