//! End-to-end checks of the command-line surface: exit codes, output
//! formats, and reproducibility of generated artifacts.

use std::path::Path;
use std::process::Command;

fn ugovor() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ugovor"))
}

fn write_contract(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("contract.json");
    std::fs::write(
        &path,
        r#"{ "window": 120,
             "resolution": [[["240p",1],["360p",1],["480p",1],["720p",1],["1080p",1]]],
             "rebuffering": [30] }"#,
    )
    .unwrap();
    path
}

#[test]
fn validate_contract_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_contract(dir.path());
    let status = ugovor()
        .args(["validate-contract"])
        .arg(&good)
        .status()
        .unwrap();
    assert!(status.success());

    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"window":0,"resolution":[[["720p",1]]],"rebuffering":[1]}"#,
    )
    .unwrap();
    let out = ugovor()
        .args(["validate-contract"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error"), "structured error message: {err}");
}

#[test]
fn usage_errors_exit_two() {
    let out = ugovor().args(["no-such-subcommand"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sample_size_prints_the_anchor() {
    let out = ugovor()
        .args(["sample-size", "--confidence", "0.95", "--margin", "0.05"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "384");
}

#[test]
fn gen_corpus_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.trace");
    let b = dir.path().join("b.trace");
    for out in [&a, &b] {
        let status = ugovor()
            .args(["gen-corpus", "--seed", "7", "--sessions", "5", "--out"])
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn replay_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let contract = write_contract(dir.path());
    let trace = dir.path().join("t.trace");
    let status = ugovor()
        .args([
            "gen-corpus",
            "--seed",
            "3",
            "--sessions",
            "2",
            "--duration-median-s",
            "30",
            "--out",
        ])
        .arg(&trace)
        .status()
        .unwrap();
    assert!(status.success());

    let report = dir.path().join("report.jsonl");
    let log_dir = dir.path().join("logs");
    let out = ugovor()
        .args([
            "replay",
            "--time-scale",
            "0.05",
            "--concurrency",
            "2",
            "--trace",
        ])
        .arg(&trace)
        .arg("--contract")
        .arg(&contract)
        .arg("--out")
        .arg(&report)
        .arg("--log-dir")
        .arg(&log_dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let line = String::from_utf8_lossy(&out.stdout);
    assert!(line.contains("\"terminated\":0"), "honest replay: {line}");

    // The per-session audit logs and the index landed.
    assert!(log_dir.join("index.jsonl").exists());

    let cdf_dir = dir.path().join("cdf");
    let status = ugovor()
        .args(["analyze", "cdf", "--report"])
        .arg(&report)
        .arg("--out")
        .arg(&cdf_dir)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(cdf_dir.join("switches_per_minute.tsv").exists());
    assert!(cdf_dir.join("rebuffer_duration_s.tsv").exists());

    let out = ugovor()
        .args(["analyze", "bounds", "--report"])
        .arg(&report)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("max_ratio"), "{text}");

    let out = ugovor()
        .args(["analyze", "price", "--schedule", "1.0", "--report"])
        .arg(&report)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("total"));

    let out = ugovor()
        .args(["analyze", "summary", "--log-dir"])
        .arg(&log_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("\"closed\":2"), "{text}");
}

#[test]
fn replay_with_fault_script_terminates() {
    let dir = tempfile::tempdir().unwrap();
    let contract = write_contract(dir.path());
    let trace = dir.path().join("t.trace");
    assert!(ugovor()
        .args([
            "gen-corpus",
            "--seed",
            "9",
            "--sessions",
            "1",
            "--duration-median-s",
            "30",
            "--out",
        ])
        .arg(&trace)
        .status()
        .unwrap()
        .success());

    let faults = dir.path().join("faults.fs");
    std::fs::write(
        &faults,
        r#"{"session_id":null,"behavior":{"fault":"fabricate_event","kind":{"resolution_change":{"resolution":"4K"}},"pts":2.0},"activation_s":6.0}"#,
    )
    .unwrap();
    let report = dir.path().join("report.jsonl");
    let out = ugovor()
        .args(["replay", "--time-scale", "0.05", "--trace"])
        .arg(&trace)
        .arg("--contract")
        .arg(&contract)
        .arg("--faults")
        .arg(&faults)
        .arg("--out")
        .arg(&report)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(
        String::from_utf8_lossy(&out.stdout).contains("\"terminated\":1"),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
}

#[test]
fn deterministic_replays_write_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let contract = write_contract(dir.path());
    let trace = dir.path().join("t.trace");
    assert!(ugovor()
        .args([
            "gen-corpus",
            "--seed",
            "11",
            "--sessions",
            "2",
            "--duration-median-s",
            "30",
            "--out",
        ])
        .arg(&trace)
        .status()
        .unwrap()
        .success());
    let mut reports = Vec::new();
    for name in ["r1.jsonl", "r2.jsonl"] {
        let report = dir.path().join(name);
        assert!(ugovor()
            .args([
                "replay",
                "--time-scale",
                "0.05",
                "--deterministic",
                "--trace",
            ])
            .arg(&trace)
            .arg("--contract")
            .arg(&contract)
            .arg("--out")
            .arg(&report)
            .status()
            .unwrap()
            .success());
        // The totals line carries byte tallies that depend on measured
        // durations; session records must match bit for bit.
        let text = std::fs::read_to_string(&report).unwrap();
        let sessions: Vec<&str> = text
            .lines()
            .filter(|l| l.contains("\"rec\":\"session\""))
            .collect();
        reports.push(sessions.join("\n"));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn env_variable_feeds_tunables() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_contract(dir.path());
    // UGOVOR_C_MS is accepted from the environment (flags > env > file).
    let status = ugovor()
        .env("UGOVOR_C_MS", "20")
        .args(["validate-contract"])
        .arg(&good)
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn standalone_endpoints_cooperate_across_processes() {
    use std::io::{BufRead, BufReader};
    use std::process::Stdio;

    let dir = tempfile::tempdir().unwrap();
    let contract = write_contract(dir.path());
    let trace = dir.path().join("t.trace");
    let chunkmap = dir.path().join("chunks.map");
    assert!(ugovor()
        .args([
            "gen-corpus",
            "--seed",
            "17",
            "--sessions",
            "1",
            "--duration-median-s",
            "24",
            "--out",
        ])
        .arg(&trace)
        .arg("--emit-chunkmap")
        .arg(&chunkmap)
        .status()
        .unwrap()
        .success());

    let first_json_line = |child: &mut std::process::Child| -> serde_json::Value {
        let stdout = child.stdout.as_mut().expect("piped stdout");
        let mut line = String::new();
        BufReader::new(stdout).read_line(&mut line).expect("line");
        serde_json::from_str(&line).expect("json status line")
    };

    let mut auditor = ugovor()
        .args(["serve-auditor", "--listen", "127.0.0.1:0", "--log-dir"])
        .arg(dir.path().join("logs"))
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let auditor_addr = first_json_line(&mut auditor)["listening"]
        .as_str()
        .unwrap()
        .to_string();

    let mut monitor = ugovor()
        .args([
            "serve-server-monitor",
            "--listen",
            "127.0.0.1:0",
            "--auditor",
        ])
        .arg(&auditor_addr)
        .arg("--chunkmap")
        .arg(&chunkmap)
        .arg("--contract")
        .arg(&contract)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let sniffer_addr = first_json_line(&mut monitor)["sniffer_listening"]
        .as_str()
        .unwrap()
        .to_string();

    let mut video = ugovor()
        .args(["serve-video", "--listen", "127.0.0.1:0", "--trace"])
        .arg(&trace)
        .arg("--contract")
        .arg(&contract)
        .arg("--auditor")
        .arg(&auditor_addr)
        .arg("--sniffer")
        .arg(&sniffer_addr)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let video_addr = first_json_line(&mut video)["listening"]
        .as_str()
        .unwrap()
        .to_string();

    // Real time (scale 1) against a 24 s session would take 24 s; the
    // standalone client exercises the wire paths, so a short session and
    // generous test budget keep this bearable.
    let out = ugovor()
        .args(["run-client", "--server"])
        .arg(&video_addr)
        .arg("--trace")
        .arg(&trace)
        .output()
        .unwrap();

    let _ = auditor.kill();
    let _ = monitor.kill();
    let _ = video.kill();

    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let line = String::from_utf8_lossy(&out.stdout);
    assert!(line.contains("\"engaged\":true"), "{line}");
    assert!(line.contains("\"closed\":true"), "{line}");
    assert!(line.contains("\"terminated\":false"), "{line}");
}
