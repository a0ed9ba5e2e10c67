//! End-to-end command tests driving the CLI in-process against the
//! committed demo fixtures.

use std::fs;
use std::path::{Path, PathBuf};

use cpolab::cli;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("cpolab").chain(args.iter().copied()))
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn build_data_matches_expected_stats() {
    let out = tempfile::tempdir().unwrap();
    let code = run(&[
        "build-data",
        "--out-dir",
        out.path().to_str().unwrap(),
        "--input",
        fixtures().join("raw_demo.jsonl").to_str().unwrap(),
        "--fixtures",
        fixtures().join("judge_fixtures.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let stats = read_json(&out.path().join("stats.json"));
    let expected = read_json(&fixtures().join("expected_stats.json"));
    assert_eq!(stats["stats"]["count"], expected["count"]);
    assert_eq!(stats["stats"]["positive"], expected["positive"]);
    assert_eq!(stats["stats"]["negative"], expected["negative"]);
    assert_eq!(stats["input_records"], expected["input_records"]);
    let records = cpolab::corpus::load_jsonl(&out.path().join("lesson.jsonl")).unwrap();
    assert_eq!(records.len(), expected["count"].as_u64().unwrap() as usize);
    // union annotation: the judge-flagged sentence of demo-2 is negative
    let demo2 = records.iter().find(|r| r.article_id == "demo-2").unwrap();
    assert_eq!(demo2.sentence_labels(), vec![1, 0]);
    assert!(out.path().join("manifest.json").exists());
    assert!(!out.path().join(".lock").exists(), "lock not released");
}

#[test]
fn build_data_filters_none_drops_nothing() {
    // only the records with recorded judge responses, so annotation succeeds
    let raw = fs::read_to_string(fixtures().join("raw_demo.jsonl")).unwrap();
    let clean: Vec<&str> = raw.lines().take(3).collect();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("clean.jsonl");
    fs::write(&input, clean.join("\n")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let code = run(&[
        "build-data",
        "--out-dir",
        out.path().to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--fixtures",
        fixtures().join("judge_fixtures.jsonl").to_str().unwrap(),
        "--filters",
        "none",
    ]);
    assert_eq!(code, 0);
    let stats = read_json(&out.path().join("stats.json"));
    assert_eq!(stats["stats"]["count"], 3);
    assert_eq!(stats["dropped"], serde_json::json!({}));
}

#[test]
fn missing_input_is_a_usage_error() {
    let out = tempfile::tempdir().unwrap();
    let code = run(&[
        "build-data",
        "--out-dir",
        out.path().to_str().unwrap(),
        "--input",
        "/nonexistent/raw.jsonl",
        "--fixtures",
        fixtures().join("judge_fixtures.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code, cli::EXIT_USAGE);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = tempfile::tempdir().unwrap();
    let code = run(&["eval", "--out-dir", out.path().to_str().unwrap(), "--bogus"]);
    assert_eq!(code, cli::EXIT_USAGE);
}

#[test]
fn locked_out_dir_is_rejected() {
    let out = tempfile::tempdir().unwrap();
    fs::write(out.path().join(".lock"), "").unwrap();
    let code = run(&[
        "report",
        "--out-dir",
        out.path().to_str().unwrap(),
        "--run-dir",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(code, cli::EXIT_USAGE);
}

#[test]
fn annotate_emits_labels() {
    let out = tempfile::tempdir().unwrap();
    let raw = fs::read_to_string(fixtures().join("raw_demo.jsonl")).unwrap();
    let clean: Vec<&str> = raw.lines().take(3).collect();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("clean.jsonl");
    fs::write(&input, clean.join("\n")).unwrap();
    let code = run(&[
        "annotate",
        "--out-dir",
        out.path().to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--fixtures",
        fixtures().join("judge_fixtures.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let body = fs::read_to_string(out.path().join("annotated.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = body
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    let demo2 = lines.iter().find(|v| v["article_id"] == "demo-2").unwrap();
    assert_eq!(demo2["labels"], serde_json::json!([1, 0]));
}

fn write_tiny_train_inputs(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let corpus = cpolab::synth::synth_corpus(8, 3);
    let dataset = dir.join("lesson.jsonl");
    cpolab::corpus::save_jsonl(&dataset, &corpus).unwrap();
    let probes = cpolab::synth::synth_probe_records(8, 3);
    let probe_path = dir.join("probes.jsonl");
    let lines: Vec<String> = probes
        .iter()
        .map(|r| serde_json::to_string(r).unwrap())
        .collect();
    fs::write(&probe_path, lines.join("\n") + "\n").unwrap();
    let config_path = dir.join("config.json");
    fs::write(
        &config_path,
        serde_json::json!({
            "model": {
                "n_layers": 2, "d_model": 16, "n_heads": 2,
                "vocab_size": 258, "max_seq_len": 512
            },
            "train": { "epochs": 1, "batch_size": 4, "k": 1 },
            "probe": { "epochs": 10, "lr": 0.01 }
        })
        .to_string(),
    )
    .unwrap();
    (dataset, probe_path, config_path)
}

#[test]
fn train_dry_run_validates_without_training() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, probes, config) = write_tiny_train_inputs(dir.path());
    let out = tempfile::tempdir().unwrap();
    let code = run(&[
        "train",
        "--out-dir",
        out.path().to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--probe-set",
        probes.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--dry-run",
    ]);
    assert_eq!(code, 0);
    assert!(!out.path().join("epoch-0").exists());
    assert!(out.path().join("manifest.json").exists());
}

#[test]
fn default_train_config_lands_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, probes, _) = write_tiny_train_inputs(dir.path());
    let out = tempfile::tempdir().unwrap();
    let code = run(&[
        "train",
        "--out-dir",
        out.path().to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--probe-set",
        probes.to_str().unwrap(),
        "--dry-run",
    ]);
    assert_eq!(code, 0);
    let manifest = read_json(&out.path().join("manifest.json"));
    let train = &manifest["config"]["train"];
    assert_eq!(train["batch_size"], 8);
    assert_eq!(train["epochs"], 5);
    assert_eq!(train["lr"], 1e-5);
    assert_eq!(train["weight_decay"], 3e-7);
    assert_eq!(train["warmup_ratio"], 0.2);
    assert_eq!(train["alpha"], 0.05);
    assert_eq!(train["k"], 4);
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, probes, _) = write_tiny_train_inputs(dir.path());
    let out = tempfile::tempdir().unwrap();
    let code = run(&[
        "train",
        "--out-dir",
        out.path().to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--probe-set",
        probes.to_str().unwrap(),
        "--lr",
        "-1.0",
        "--dry-run",
    ]);
    assert_eq!(code, cli::EXIT_USAGE);
}

#[test]
fn train_probe_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, probes, config) = write_tiny_train_inputs(dir.path());
    let run_dir = tempfile::tempdir().unwrap();
    let code = run(&[
        "train",
        "--out-dir",
        run_dir.path().to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--probe-set",
        probes.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(run_dir.path().join("epoch-0").exists());
    assert!(run_dir.path().join("metrics.csv").exists());

    // probe the trained checkpoint into the same run dir
    let probe_out = tempfile::tempdir().unwrap();
    let code = run(&[
        "probe",
        "--out-dir",
        probe_out.path().to_str().unwrap(),
        "--probe-set",
        probes.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        run_dir.path().join("epoch-0").to_str().unwrap(),
        "--k",
        "1",
    ]);
    assert_eq!(code, 0);
    let heads = fs::read_to_string(probe_out.path().join("heads.csv")).unwrap();
    assert_eq!(heads.lines().count(), 5); // header + 2 layers x 2 heads
    fs::copy(
        probe_out.path().join("heads.csv"),
        run_dir.path().join("heads.csv"),
    )
    .unwrap();

    // report twice; outputs must be byte-identical
    let report = |name: &str| -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let out = run_dir.path().join(name);
        let code = run(&[
            "report",
            "--out-dir",
            out.to_str().unwrap(),
            "--run-dir",
            run_dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        (
            fs::read(out.join("report/loss_curve.csv")).unwrap(),
            fs::read(out.join("report/probe_accuracy.csv")).unwrap(),
            fs::read(out.join("report/heatmap.svg")).unwrap(),
        )
    };
    let a = report("report-a");
    let b = report("report-b");
    assert_eq!(a, b);
    // 2-layer, 2-head run -> 4 heatmap cells
    assert_eq!(String::from_utf8(a.2).unwrap().matches("<rect").count(), 4);
    // loss-curve rows == recorded optimizer steps (8 items / batch 4 = 2)
    let curve = String::from_utf8(a.0).unwrap();
    assert_eq!(curve.lines().count(), 3); // header + 2 steps
}

#[test]
fn report_on_empty_dir_lists_expected_files() {
    let empty = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let code = run(&[
        "report",
        "--out-dir",
        out.path().to_str().unwrap(),
        "--run-dir",
        empty.path().to_str().unwrap(),
    ]);
    assert_eq!(code, cli::EXIT_DATA);
}

#[test]
fn eval_perfect_and_mismatched() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.txt");
    let gold = dir.path().join("gold.txt");
    fs::write(&pred, "1\n0\n1\n0\n").unwrap();
    fs::write(&gold, "1\n0\n1\n0\n").unwrap();
    let out = tempfile::tempdir().unwrap();
    let code = run(&[
        "eval",
        "--out-dir",
        out.path().to_str().unwrap(),
        "--predictions",
        pred.to_str().unwrap(),
        "--gold",
        gold.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let eval = read_json(&out.path().join("eval.json"));
    assert_eq!(eval["balanced_accuracy"], 1.0);

    fs::write(&gold, "1\n0\n1\n").unwrap();
    let out2 = tempfile::tempdir().unwrap();
    let code = run(&[
        "eval",
        "--out-dir",
        out2.path().to_str().unwrap(),
        "--predictions",
        pred.to_str().unwrap(),
        "--gold",
        gold.to_str().unwrap(),
    ]);
    assert_eq!(code, cli::EXIT_USAGE);
}

#[test]
fn eval_union_fixture_against_synthetic_gold() {
    // demo corpus sentence labels (union-annotated): demo-1 [1,1],
    // demo-2 [1,0], demo-3 [1]; synthetic gold flips demo-1's second
    // sentence. Hand enumeration: TP 3, FN 1, TN 1, FP 0 -> BA 0.875.
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.txt");
    let gold = dir.path().join("gold.txt");
    fs::write(&pred, "1\n0\n1\n0\n1\n").unwrap();
    fs::write(&gold, "1\n1\n1\n0\n1\n").unwrap();
    let out = tempfile::tempdir().unwrap();
    let code = run(&[
        "eval",
        "--out-dir",
        out.path().to_str().unwrap(),
        "--predictions",
        pred.to_str().unwrap(),
        "--gold",
        gold.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let eval = read_json(&out.path().join("eval.json"));
    assert_eq!(eval["balanced_accuracy"], 0.875);
    assert_eq!(eval["confusion"]["tp"], 3);
    assert_eq!(eval["confusion"]["fn"], 1);
}
