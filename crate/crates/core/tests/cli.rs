use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn tays(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tays"))
        .args(args)
        .env_remove("TAYS_SEED")
        .output()
        .expect("spawn tays")
}

fn ok(args: &[&str]) -> Vec<u8> {
    let out = tays(args);
    assert!(
        out.status.success(),
        "tays {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

fn fixture(name: &str) -> String {
    root().join("fixtures").join(name).to_string_lossy().into_owned()
}

fn assert_schema(schema: &str, instance: &Value) {
    let text = std::fs::read(root().join("schemas").join(schema)).unwrap();
    let schema: Value = serde_json::from_slice(&text).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator
        .iter_errors(instance)
        .map(|e| format!("{e} at {}", e.instance_path))
        .collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

#[test]
fn simulate_reports_match_schema() {
    for paradigm in ["batch", "interleaved", "parallel"] {
        let out = ok(&["simulate", "--paradigm", paradigm, "--frames", "6"]);
        let report: Value = serde_json::from_slice(&out).unwrap();
        assert_schema("run_report.schema.json", &report);
        assert_eq!(report["paradigm"], paradigm);
    }
}

#[test]
fn simulate_batch_ttft_on_prebuffered_frames() {
    let report: Value = serde_json::from_slice(&ok(&["simulate", "--paradigm", "batch"])).unwrap();
    let ttft = report["ttft_s"].as_f64().unwrap();
    assert!((ttft - 2.02).abs() < 1e-12, "{ttft}");
}

#[test]
fn simulate_reads_a_stream_file() {
    let stream = fixture("stream.json");
    let spec: Value = serde_json::from_str(&std::fs::read_to_string(&stream).unwrap()).unwrap();
    assert_schema("stream.schema.json", &spec);
    let report: Value = serde_json::from_slice(&ok(&["simulate", "--stream", &stream, "--arrival", "live"])).unwrap();
    assert_eq!(report["n_frames"], 12);
    assert_eq!(report["decoder_ttft_s"].as_f64(), Some(0.02));
}

#[test]
fn mask_dump_is_run_length() {
    let dir = tempfile::tempdir().unwrap();
    let mask = dir.path().join("mask.json");
    ok(&[
        "simulate",
        "--frames",
        "3",
        "--dump-mask",
        mask.to_str().unwrap(),
        "--out",
        dir.path().join("r.json").to_str().unwrap(),
    ]);
    let dump: Value = serde_json::from_str(&std::fs::read_to_string(&mask).unwrap()).unwrap();
    assert_eq!(dump["paradigm"], "parallel");
    assert_eq!(dump["visual_tokens"], 12);
}

#[test]
fn seed_env_overrides_flag() {
    let run = |env: Option<&str>, seed: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_tays"));
        cmd.args(["simulate", "--frames", "4", "--seed", seed]);
        match env {
            Some(v) => cmd.env("TAYS_SEED", v),
            None => cmd.env_remove("TAYS_SEED"),
        };
        let out = cmd.output().unwrap();
        assert!(out.status.success());
        let v: Value = serde_json::from_slice(&out.stdout).unwrap();
        v["model"]["seed"].as_u64().unwrap()
    };
    assert_eq!(run(None, "3"), 3);
    assert_eq!(run(Some("11"), "3"), 11);
}

#[test]
fn bad_seed_env_is_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_tays"))
        .args(["simulate", "--frames", "2"])
        .env("TAYS_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("TAYS_SEED"));
}

#[test]
fn unknown_paradigm_is_a_usage_error() {
    let out = tays(&["simulate", "--paradigm", "speculative"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_csv_shape() {
    let csv = String::from_utf8(ok(&["bench", "--fps", "1,3", "--duration", "5"])).unwrap();
    assert!(!csv.contains('\r'));
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("paradigm,fps,ttft_s,delay_s,"));
    assert_eq!(lines.count(), 6);
    assert!(csv.ends_with('\n'));
}

#[test]
fn bench_rejects_out_of_range_fps() {
    let out = tays(&["bench", "--fps", "0..3"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn prepare_fixture_is_deterministic_and_schema_valid() {
    let args = [
        "prepare",
        "--annotations",
        &fixture("annotations.jsonl"),
        "--embeddings",
        &fixture("embeddings.jsonl"),
    ];
    let a = ok(&args);
    let b = ok(&args);
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    for line in lines {
        let traj: Value = serde_json::from_str(line).unwrap();
        assert_schema("trajectory.schema.json", &traj);
        let frames = traj["frames"].as_array().unwrap();
        assert_eq!(frames.len(), traj["supervision"].as_array().unwrap().len());
    }
}

#[test]
fn prepare_rejects_wide_epsilon() {
    let out = tays(&[
        "prepare",
        "--annotations",
        &fixture("annotations.jsonl"),
        "--epsilon",
        "0.25",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epsilon"));
}

#[test]
fn eval_cases_and_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run.json");
    ok(&[
        "simulate",
        "--frames",
        "8",
        "--arrival",
        "live",
        "--out",
        run.to_str().unwrap(),
    ]);
    let out = ok(&[
        "eval",
        "--cases",
        &fixture("cases.jsonl"),
        "--run",
        run.to_str().unwrap(),
        "--keyframes",
        "0.5,2.0,3.5",
    ]);
    let report: Value = serde_json::from_slice(&out).unwrap();
    assert_schema("eval_report.schema.json", &report);
    assert_eq!(report["accuracy"]["overall"]["total"], 5);
    assert!(report["alignment"]["deltas"].is_array());
    assert_eq!(report["coherence"]["histogram"].as_array().unwrap().len(), 10);
}

#[test]
fn eval_predictions_file_and_threshold_alias() {
    let dir = tempfile::tempdir().unwrap();
    let cases = fixture("cases.jsonl");
    let first: Value = serde_json::from_str(std::fs::read_to_string(&cases).unwrap().lines().next().unwrap()).unwrap();
    let id = first["id"].as_str().unwrap();
    let wrong = first["options"][(first["correct"].as_u64().unwrap() as usize + 1) % 4]
        .as_str()
        .unwrap();
    let pred = dir.path().join("pred.jsonl");
    std::fs::write(
        &pred,
        format!("{}\n", serde_json::json!({"id": id, "prediction": wrong})),
    )
    .unwrap();

    let base: Value = serde_json::from_slice(&ok(&["eval", "--cases", &cases, "--threshold", "0.8"])).unwrap();
    let swapped: Value = serde_json::from_slice(&ok(&[
        "eval",
        "--cases",
        &cases,
        "--pred",
        pred.to_str().unwrap(),
        "--embedder",
        "hash",
    ]))
    .unwrap();
    assert_schema("eval_report.schema.json", &swapped);
    assert_eq!(base["tau"], 0.8);
    assert_eq!(swapped["cases"][0]["verdict"], "incorrect");
    assert_eq!(
        base["cases"].as_array().unwrap()[1..],
        swapped["cases"].as_array().unwrap()[1..]
    );

    std::fs::write(&pred, "{\"id\": \"nope\", \"prediction\": \"x\"}\n").unwrap();
    let out = tays(&["eval", "--cases", &cases, "--pred", pred.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn embedder_selection_is_checked() {
    let cases = fixture("cases.jsonl");
    let out = tays(&["eval", "--cases", &cases, "--embedder", "file"]);
    assert_eq!(out.status.code(), Some(1));
    let out = tays(&[
        "eval",
        "--cases",
        &cases,
        "--embedder",
        "hash",
        "--embeddings",
        &fixture("embeddings.jsonl"),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_needs_an_input() {
    let out = tays(&["eval"]);
    assert_ne!(out.status.code(), Some(0));
}
