//! Command-line contract: exit codes, output files, flag validation and
//! reproducibility from the resolved-config snapshot.

use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simulstream"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by a signal")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = cli(dir, args);
    assert_eq!(code(&out), 0, "simulstream {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    out
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

/// A small corpus plus a briefly trained model, shared by the read-only tests.
struct Fixture {
    dir: TempDir,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        ok(dir.path(), &["gen-data", "--n", "40", "--n-test", "12", "--out", "data"]);
        ok(dir.path(), &["train", "--corpus", "data/train.jsonl", "--steps", "3", "--batch-size", "2", "--out", "model"]);
        Fixture { dir }
    })
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cli(dir.path(), &["--help"])), 0);
    assert_eq!(code(&cli(dir.path(), &["--version"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    let f = fixture();
    let d = f.dir.path();
    for args in [
        vec![],
        vec!["no-such-command"],
        vec!["gen-data", "--n", "0", "--out", "zero"],
        vec!["gen-data", "--n", "abc", "--out", "x"],
        vec!["gen-data", "--n", "5"],
        vec!["eval", "--ckpt", "model", "--corpus", "data/test.jsonl", "--out", "e", "--mode", "simul", "--k", "3"],
        vec!["eval", "--ckpt", "model", "--corpus", "data/test.jsonl", "--out", "e", "--mode", "offline", "--C", "4"],
        vec!["eval", "--ckpt", "model", "--corpus", "data/test.jsonl", "--out", "e", "--mode", "waitk"],
        vec!["eval", "--ckpt", "model", "--corpus", "data/test.jsonl", "--out", "e", "--mode", "waitk", "--C", "4", "--k", "2"],
        vec!["eval", "--ckpt", "model", "--corpus", "data/test.jsonl", "--out", "e", "--C", "0"],
        vec!["curve", "--ckpt", "model", "--corpus", "data/test.jsonl", "--out", "c", "--grid", "2,x"],
        vec!["train", "--corpus", "data/train.jsonl", "--out", "t", "--chunk-mode", "fixed"],
        vec!["train", "--corpus", "data/train.jsonl", "--out", "t", "--C", "4"],
        vec!["inspect", "--ckpt", "model", "--corpus", "data/test.jsonl", "--sample", "999"],
    ] {
        let out = cli(d, &args);
        assert_eq!(code(&out), 1, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(!d.join("zero").exists());
}

#[test]
fn runtime_failures_exit_two() {
    let f = fixture();
    let d = f.dir.path();
    let missing = cli(d, &["eval", "--ckpt", "nowhere", "--corpus", "data/test.jsonl", "--out", "e"]);
    assert_eq!(code(&missing), 2);
    assert!(!missing.stderr.is_empty());
    let bad_corpus = cli(d, &["train", "--corpus", "data/stats.json", "--out", "t"]);
    assert_eq!(code(&bad_corpus), 2);
    let weights_only = cli(d, &["train", "--corpus", "data/train.jsonl", "--ckpt", "data", "--out", "t"]);
    assert_eq!(code(&weights_only), 2);
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nstepz = 3\n").unwrap();
    assert_eq!(code(&cli(dir.path(), &["--config", "bad.toml", "gen-data", "--out", "x"])), 1);
}

#[test]
fn gen_data_writes_three_splits_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(d, &["gen-data", "--n", "30", "--out", "a"]);
    ok(d, &["gen-data", "--n", "30", "--out", "b"]);
    let stats: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["train"]["samples"], 30);
    assert_eq!(stats["valid"]["samples"], 3);
    assert_eq!(stats["test"]["samples"], 3);
    assert!(stats["train"]["mean_unit_ratio"].as_f64().unwrap() > 1.0);
    for file in ["train.jsonl", "valid.jsonl", "test.jsonl", "stats.json", "resolved_config.toml"] {
        assert_eq!(read(d, &format!("a/{file}")), read(d, &format!("b/{file}")).replace("\"b\"", "\"a\""), "{file}");
    }
    // Splits come from separate streams.
    let first_sample = |split: &str| read(d, &format!("a/{split}.jsonl")).lines().nth(1).unwrap().to_string();
    assert_ne!(first_sample("train"), first_sample("valid"));
    assert_ne!(first_sample("valid"), first_sample("test"));

    ok(d, &["--seed", "2", "gen-data", "--n", "30", "--out", "c"]);
    assert_ne!(read(d, "a/train.jsonl"), read(d, "c/train.jsonl"));
}

#[test]
fn train_logs_every_step_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--n", "20", "--out", "data"]);
    ok(d, &["train", "--corpus", "data/train.jsonl", "--steps", "10", "--batch-size", "2", "--out", "ten"]);
    let log = read(d, "ten/loss.csv");
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "step,chunk,s2ut,ar_s2tt,asr,nar_s2tt,total,lr,grad_norm,skipped");
    let steps: Vec<u64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (1..=10).collect::<Vec<_>>());
    assert!(d.join("ten/checkpoint").is_dir());
    assert!(d.join("ten/resolved_config.toml").is_file());

    // 6 steps, then resume to 10: same log and same checkpoint as 10 straight.
    ok(d, &["train", "--corpus", "data/train.jsonl", "--steps", "6", "--batch-size", "2", "--out", "six"]);
    ok(d, &["train", "--corpus", "data/train.jsonl", "--ckpt", "six", "--steps", "10", "--out", "resumed"]);
    assert_eq!(read(d, "resumed/loss.csv"), log);
    for entry in std::fs::read_dir(d.join("ten/checkpoint")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(d.join("ten/checkpoint").join(&name)).unwrap();
        let b = std::fs::read(d.join("resumed/checkpoint").join(&name)).unwrap();
        assert!(a == b, "{name:?} differs after resume");
    }
    // Asking for fewer steps than already taken is refused.
    let back = cli(d, &["train", "--corpus", "data/train.jsonl", "--ckpt", "six", "--steps", "3", "--out", "back"]);
    assert_eq!(code(&back), 1);
}

#[test]
fn fixed_chunk_mode_trains_with_that_chunk() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--n", "10", "--out", "data"]);
    ok(d, &["train", "--corpus", "data/train.jsonl", "--steps", "3", "--batch-size", "2", "--chunk-mode", "fixed", "--C", "8", "--out", "m"]);
    let chunks: Vec<String> = read(d, "m/loss.csv").lines().skip(1).map(|l| l.split(',').nth(1).unwrap().to_string()).collect();
    assert_eq!(chunks, ["8", "8", "8"]);
    ok(d, &["train", "--corpus", "data/train.jsonl", "--steps", "2", "--batch-size", "2", "--chunk-mode", "offline", "--out", "o"]);
    assert!(read(d, "o/loss.csv").lines().skip(1).all(|l| l.split(',').nth(1) == Some("inf")));
}

#[test]
fn eval_writes_report_traces_and_outputs() {
    let f = fixture();
    let d = f.dir.path();
    let out = tempfile::tempdir_in(d).unwrap();
    let rel = out.path().file_name().unwrap().to_str().unwrap().to_string();
    ok(d, &["eval", "--ckpt", "model", "--corpus", "data/test.jsonl", "--mode", "offline", "--out", &rel]);
    let report: Value = serde_json::from_str(&read(out.path(), "report.json")).unwrap();
    assert!(report["unit_bleu"].is_number());
    assert!(report["latency"].is_object() || report["empty_outputs"] == 12);
    let csv = read(out.path(), "report.csv");
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].split(',').count(), rows[1].split(',').count());
    assert_eq!(read(out.path(), "outputs.jsonl").lines().count(), 12);
    let traces = std::fs::read_dir(out.path().join("traces")).unwrap().count();
    assert_eq!(traces, 12);
    assert!(out.path().join("traces/sample_00000.json").is_file());
}

#[test]
fn waitk_traces_start_at_k_chunks() {
    let f = fixture();
    let d = f.dir.path();
    ok(d, &["eval", "--ckpt", "model", "--corpus", "data/test.jsonl", "--mode", "waitk", "--k", "3", "--out", "waitk"]);
    for i in 0..12 {
        let trace: Value = serde_json::from_str(&read(d, &format!("waitk/traces/sample_{i:05}.json"))).unwrap();
        let x_ms = trace["totals"]["x_ms"].as_f64().unwrap();
        let first = trace["tokens"][0]["ms"].as_f64().unwrap();
        assert_eq!(first, x_ms.min(3.0 * 320.0), "sample {i}");
    }
}

#[test]
fn snapshot_reproduces_the_run() {
    let f = fixture();
    let d = f.dir.path();
    ok(d, &["eval", "--ckpt", "model", "--corpus", "data/test.jsonl", "--C", "2", "--limit", "5", "--out", "snap"]);
    let first = read(d, "snap/report.csv");
    ok(d, &["--config", "snap/resolved_config.toml", "eval"]);
    assert_eq!(read(d, "snap/report.csv"), first);
    let snapshot = read(d, "snap/resolved_config.toml");
    assert!(snapshot.contains("chunk = \"2\""));
    assert!(snapshot.contains("limit = 5"));
}

#[test]
fn flags_override_the_config_file() {
    let f = fixture();
    let d = f.dir.path();
    std::fs::write(d.join("cfg.toml"), "[eval]\nmode = \"offline\"\nlimit = 2\n").unwrap();
    ok(d, &["--config", "cfg.toml", "eval", "--ckpt", "model", "--corpus", "data/test.jsonl", "--limit", "3", "--out", "over"]);
    let report: Value = serde_json::from_str(&read(d, "over/report.json")).unwrap();
    assert_eq!(report["samples"], 3);
    assert_eq!(report["mode"]["policy"], "offline");
}

#[test]
fn curve_has_one_row_per_chunk_size() {
    let f = fixture();
    let d = f.dir.path();
    ok(d, &["curve", "--ckpt", "model", "--corpus", "data/test.jsonl", "--grid", "2,4,8,16,inf", "--out", "curve"]);
    let csv = read(d, "curve/curve.csv");
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 5);
    for row in &rows {
        if let (Ok(al), Ok(al_ca)) = (row[col("AL")].parse::<f64>(), row[col("AL_CA")].parse::<f64>()) {
            assert!(al_ca >= al, "{row:?}");
        }
    }
    let plot: Value = serde_json::from_str(&read(d, "curve/curve_plot.json")).unwrap();
    let names: Vec<&str> = plot["series"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["ideal", "computation_aware"]);

    ok(d, &["curve", "--ckpt", "model", "--corpus", "data/test.jsonl", "--grid", "2,4,8,16,inf", "--out", "curve2"]);
    assert_eq!(read(d, "curve2/curve.csv"), csv);
}

#[test]
fn inspect_emits_json_without_blank_labels() {
    let f = fixture();
    let d = f.dir.path();
    let out = ok(d, &["inspect", "--ckpt", "model", "--corpus", "data/test.jsonl", "--sample", "2", "--C", "4"]);
    let dump: Value = serde_json::from_slice(&out.stdout).unwrap();
    let frames = dump["frames"].as_u64().unwrap();
    for key in ["asr_labels", "nar_s2tt_labels"] {
        for entry in dump[key].as_array().unwrap() {
            assert_ne!(entry["label"], 2, "blank listed in {key}");
            assert!(entry["frame"].as_u64().unwrap() < frames);
        }
    }
    let bounds: Vec<u64> = dump["chunk_boundaries"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(*bounds.last().unwrap(), frames);
    assert!(bounds.iter().all(|b| b % 4 == 0 || *b == frames));
    let g: Vec<u64> = dump["emissions"].as_array().unwrap().iter().map(|e| e["g"].as_u64().unwrap()).collect();
    assert!(g.windows(2).all(|w| w[0] <= w[1]));
    let agreement = dump["asr_span_agreement"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&agreement));
}
