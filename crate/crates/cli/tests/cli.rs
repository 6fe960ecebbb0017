//! CLI integration: pipeline smoke via the library API plus binary-level
//! exit-code checks.

use std::path::{Path, PathBuf};
use std::process::Command;

use intervene_cli::*;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_intervene")
}

fn tiny_pipeline(dir: &Path, repeats: usize) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    let gen = GenDataArgs {
        task: Some("agreement".parse().unwrap()),
        seed: Some(3),
        out: Some(dir.to_path_buf()),
        n_train: Some(80),
        n_eval: Some(20),
        ..Default::default()
    };
    let (train, eval) = cmd_gen_data(&gen).unwrap();

    let ckpt = dir.join("lm.ckpt");
    let train_args = TrainLmArgs {
        corpus: Some(train.clone()),
        eval_corpus: Some(eval.clone()),
        seed: Some(0),
        out: Some(ckpt.clone()),
        hidden_size: Some(16),
        embedding_size: Some(16),
        epochs: Some(2),
        ..Default::default()
    };
    cmd_train_lm(&train_args).unwrap();

    let results = dir.join("results.jsonl");
    let find = FindUnitsArgs {
        checkpoint: Some(ckpt.clone()),
        corpus: Some(train.clone()),
        eval_corpus: Some(eval.clone()),
        seed: Some(0),
        repeats: Some(repeats),
        out: Some(results.clone()),
        search: SearchArgs {
            search_epochs: Some(2),
            max_train_instances: Some(24),
            ..Default::default()
        },
        ..Default::default()
    };
    cmd_find_units(&find).unwrap();
    (train, eval, ckpt, results)
}

#[test]
fn pipeline_smoke_and_single_run_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let (_, eval, ckpt, results) = tiny_pipeline(dir.path(), 1);

    // repeats=1: the aggregate equals the single run
    let text = std::fs::read_to_string(&results).unwrap();
    let records: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 1);
    let agg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(results.with_extension("aggregate.json")).unwrap())
            .unwrap();
    assert_eq!(agg["runs"], 1);
    assert_eq!(
        agg["mean_accuracy"].as_f64(),
        records[0]["accuracy"].as_f64()
    );
    assert_eq!(agg["mean_units"].as_f64(), records[0]["units"].as_f64());

    // evaluate both bare and under the saved record
    let eval_args = EvaluateArgs {
        checkpoint: Some(ckpt.clone()),
        eval_corpus: Some(eval.clone()),
        results: None,
        run: 0,
        manifest: None,
    };
    let out = cmd_evaluate(&eval_args).unwrap();
    assert!(out.preference_accuracy.is_some());

    let eval_args = EvaluateArgs {
        checkpoint: Some(ckpt),
        eval_corpus: Some(eval),
        results: Some(results),
        run: 0,
        manifest: None,
    };
    let out = cmd_evaluate(&eval_args).unwrap();
    let metrics = out.intervention.unwrap();
    assert!(metrics.accuracy >= 0.0 && metrics.accuracy <= 1.0);
}

#[test]
fn repeats_produce_one_record_each() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, _, results) = tiny_pipeline(dir.path(), 3);
    let text = std::fs::read_to_string(&results).unwrap();
    assert_eq!(text.lines().count(), 3);
    let ids: Vec<u64> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["run_id"].as_u64().unwrap())
        .collect();
    assert_eq!(ids, vec![0, 1, 2]);
}

#[test]
fn trace_row_count_contract() {
    let dir = tempfile::tempdir().unwrap();
    let (_, eval, ckpt, results) = tiny_pipeline(dir.path(), 1);
    let out = dir.path().join("trace.tsv");
    let trace_args = TraceArgs {
        checkpoint: Some(ckpt),
        eval_corpus: Some(eval.clone()),
        results: Some(results.clone()),
        run: 0,
        instance: 0,
        out: Some(out.clone()),
        manifest: None,
    };
    cmd_trace(&trace_args).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    let record: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&results).unwrap().lines().next().unwrap())
            .unwrap();
    let units = record["unit_ids"].as_array().unwrap().len();
    let eval_instances = std::fs::read_to_string(&eval).unwrap();
    let sentence_len = eval_instances.lines().next().unwrap().split('\t').next().unwrap()
        .split(' ')
        .count();
    assert_eq!(text.lines().count() - 1, (sentence_len - 1) * units);
}

#[test]
fn report_merges_result_files() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, _, results) = tiny_pipeline(dir.path(), 2);
    let out = dir.path().join("prevalence.tsv");
    let agg = cmd_report(&ReportArgs {
        results: vec![results.clone(), results],
        out: Some(out.clone()),
    })
    .unwrap();
    assert_eq!(agg.runs, 4);
    let tsv = std::fs::read_to_string(&out).unwrap();
    assert!(tsv.starts_with("unit\tprevalence"));
}

#[test]
fn manifest_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = dir.path().join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::json!({
            "task": "agreement",
            "seed": 5,
            "out": dir.path(),
            "n_train": 40,
            "n_eval": 10
        })
        .to_string(),
    )
    .unwrap();

    // pure manifest run
    let args = GenDataArgs {
        manifest: Some(manifest_path.clone()),
        ..Default::default()
    };
    let (train, _) = cmd_gen_data(&args).unwrap();
    assert_eq!(std::fs::read_to_string(&train).unwrap().lines().count(), 40);

    // flag overrides the manifest
    let args = GenDataArgs {
        n_train: Some(25),
        manifest: Some(manifest_path),
        ..Default::default()
    };
    let (train, _) = cmd_gen_data(&args).unwrap();
    assert_eq!(std::fs::read_to_string(&train).unwrap().lines().count(), 25);
}

#[test]
fn exit_codes_follow_the_contract() {
    // usage error: missing required option
    let out = Command::new(bin())
        .args(["gen-data", "--task", "agreement"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // usage error: unknown flag
    let out = Command::new(bin()).args(["find-units", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // data error: missing checkpoint, message names the path
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.tsv");
    std::fs::write(&corpus, "").unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = Command::new(bin())
        .args([
            "find-units",
            "--checkpoint",
            missing.to_str().unwrap(),
            "--corpus",
            corpus.to_str().unwrap(),
            "--eval-corpus",
            corpus.to_str().unwrap(),
            "--out",
            dir.path().join("r.jsonl").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing.ckpt"), "{stderr}");

    // help exits 0
    let out = Command::new(bin()).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}
