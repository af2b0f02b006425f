//! CLI surface: subcommands, exit codes, and report/synth artifacts.

use std::path::Path;
use std::process::{Command, Output};

fn promptforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptforge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, value: serde_json::Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, value.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

fn small_synthetic_config(seed: u64) -> serde_json::Value {
    serde_json::json!({
        "task": {"synthetic_preset": "separable-2x6", "example_count": 40, "task_seed": 3},
        "optimizer": {"kind": "zero_shot_mipro", "instruction_candidates": 4},
        "budget": {"max_trials": 10, "minibatch_size": 40, "full_eval_interval": 5},
        "seed": seed
    })
}

#[test]
fn optimize_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.json", small_synthetic_config(1));
    let out = dir.path().join("run");
    let output = promptforge(&["optimize", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    for file in ["config.json", "instructions.json", "trials.jsonl", "best.json", "demos.jsonl"] {
        assert!(out.join(file).exists(), "missing {file}");
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("best full score"));

    let best: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("best.json")).unwrap()).unwrap();
    assert!(best["score"].as_f64().unwrap() >= 0.0);
    assert!(best["assignment"].get("m0.instruction").is_some());
}

#[test]
fn report_emits_monotone_running_best_and_progression() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.json", small_synthetic_config(2));
    let out = dir.path().join("run");
    assert!(promptforge(&["optimize", "--config", &config, "--out", out.to_str().unwrap()])
        .status
        .success());
    let output = promptforge(&["report", out.to_str().unwrap()]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));

    let csv = std::fs::read_to_string(out.join("trials.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "trial_index,kind,score,running_best_full,params"
    );
    let mut previous = f64::NEG_INFINITY;
    let mut rows = 0;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let running: f64 = fields[3].parse().unwrap();
        assert!(running >= previous.min(running.max(previous)));
        assert!(running >= previous || previous == f64::NEG_INFINITY);
        previous = running;
        rows += 1;
    }
    assert!(rows >= 11);

    // Progression: (trial, instructions, score) triples at improvements.
    let progression: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(out.join("progression.json")).unwrap())
            .unwrap();
    assert!(!progression.is_empty());
    let mut last = f64::NEG_INFINITY;
    for entry in &progression {
        let score = entry["score"].as_f64().unwrap();
        assert!(score > last, "progression scores strictly increase");
        last = score;
        assert!(entry["instructions"].as_object().unwrap().contains_key("stage0"));
        assert!(entry["trial_index"].is_u64());
    }
}

#[test]
fn report_json_format_prints_rows_and_progression() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.json", small_synthetic_config(6));
    let out = dir.path().join("run");
    assert!(promptforge(&["optimize", "--config", &config, "--out", out.to_str().unwrap()])
        .status
        .success());
    let output = promptforge(&["report", out.to_str().unwrap(), "--format", "json"]);
    assert!(output.status.success());
    let value: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("json report on stdout");
    assert!(!value["rows"].as_array().unwrap().is_empty());
    assert!(!value["progression"].as_array().unwrap().is_empty());
}

#[test]
fn parallelism_does_not_change_the_trial_log() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.json", small_synthetic_config(8));
    for (out, parallelism) in [("p1", "1"), ("p4", "4")] {
        assert!(promptforge(&[
            "optimize",
            "--config",
            &config,
            "--out",
            dir.path().join(out).to_str().unwrap(),
            "--parallelism",
            parallelism,
        ])
        .status
        .success());
    }
    let a = std::fs::read(dir.path().join("p1/trials.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("p4/trials.jsonl")).unwrap();
    assert_eq!(a, b, "aggregation order is example order, not completion order");
}

#[test]
fn report_on_empty_trial_log_is_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("trials.jsonl"), "").unwrap();
    std::fs::write(
        dir.path().join("config.json"),
        serde_json::json!({
            "resolved": {
                "search_space": {"params": []},
                "module_names": ["stage0"],
            }
        })
        .to_string(),
    )
    .unwrap();
    std::fs::write(dir.path().join("instructions.json"), "[]").unwrap();
    let output = promptforge(&["report", dir.path().to_str().unwrap()]);
    assert!(output.status.success());
    let csv = std::fs::read_to_string(dir.path().join("trials.csv")).unwrap();
    assert_eq!(csv.trim(), "trial_index,kind,score,running_best_full,params");
}

#[test]
fn report_without_log_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let output = promptforge(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("missing log"));
}

#[test]
fn importance_csv_written_for_meta_optimizer() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "config.json",
        serde_json::json!({
            "task": {"synthetic_preset": "noisy-3x4", "example_count": 40, "task_seed": 9},
            "optimizer": {"kind": "zero_shot_mipro_pp", "max_demos_per_module": 0},
            "budget": {"max_trials": 8, "minibatch_size": 10, "full_eval_interval": 4},
            "seed": 3
        }),
    );
    let out = dir.path().join("run");
    assert!(promptforge(&["optimize", "--config", &config, "--out", out.to_str().unwrap()])
        .status
        .success());
    assert!(out.join("importance.json").exists());
    assert!(promptforge(&["report", out.to_str().unwrap()]).status.success());
    let importance = std::fs::read_to_string(out.join("importance.csv")).unwrap();
    assert!(importance.starts_with("param,importance"));
    assert!(importance.contains("proposer.use_dataset_summary"));
}

#[test]
fn unknown_optimizer_kind_exits_one_and_names_valid_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_synthetic_config(0);
    config["optimizer"]["kind"] = serde_json::json!("simulated_annealing");
    let path = write_config(dir.path(), "bad.json", config);
    let output = promptforge(&["optimize", "--config", &path]);
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("mipro"), "error names valid kinds: {stderr}");
}

#[test]
fn budget_exhaustion_exits_two_with_result() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_synthetic_config(4);
    // Enough for the seed evaluation (40 examples x 2 calls) but not much more.
    config["budget"]["max_lm_calls"] = serde_json::json!(100);
    let path = write_config(dir.path(), "config.json", config);
    let out = dir.path().join("run");
    let output = promptforge(&["optimize", "--config", &path, "--out", out.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(2));
    assert!(out.join("best.json").exists(), "best-so-far still written");
}

#[test]
fn repeat_offsets_seeds_into_subdirectories() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.json", small_synthetic_config(7));
    let out = dir.path().join("multi");
    let output = promptforge(&[
        "optimize",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--repeat",
        "2",
    ]);
    assert!(output.status.success());
    let a: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("r0/config.json")).unwrap()).unwrap();
    let b: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("r1/config.json")).unwrap()).unwrap();
    assert_eq!(a["resolved"]["seed"], 7);
    assert_eq!(b["resolved"]["seed"], 8);
}

#[test]
fn synth_materializes_a_runnable_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let spec = serde_json::json!({
        "name": "tiny",
        "modules": 1,
        "instruction_cardinality": [3],
        "demo_slots": [0],
        "base_quality": 0.2,
        "instruction_quality": [[0.0, 0.2, 0.5]],
        "example_count": 30,
        "seed": 11
    });
    let spec_path = write_config(dir.path(), "spec.json", spec);
    let bundle = dir.path().join("bundle");
    let output = promptforge(&["synth", "--spec", &spec_path, "--out", bundle.to_str().unwrap()]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    for file in ["dataset.jsonl", "splits.json", "oracle.json", "config.json"] {
        assert!(bundle.join(file).exists(), "missing {file}");
    }
    let oracle: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(bundle.join("oracle.json")).unwrap())
            .unwrap();
    assert_eq!(oracle["argmax"], serde_json::json!([2]));
    assert_eq!(oracle["instruction_grid"].as_array().unwrap().len(), 3);

    // The emitted config is directly runnable.
    let run_dir = dir.path().join("run");
    let output = promptforge(&[
        "optimize",
        "--config",
        bundle.join("config.json").to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn demo_store_round_trips_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "config.json",
        serde_json::json!({
            "task": {
                "synthetic": {
                    "name": "demo-reuse",
                    "modules": 1,
                    "instruction_cardinality": [2],
                    "demo_slots": [2],
                    "base_quality": 0.7,
                    "instruction_quality": [[0.0, 0.1]],
                    "demo_weight_scale": 0.05,
                    "example_count": 30,
                    "seed": 13
                }
            },
            "optimizer": {
                "kind": "bootstrap_rs",
                "max_demos_per_module": 2,
                "demo_candidate_sets": 3,
                "bootstrap_threshold": 1.0
            },
            "budget": {"max_trials": 5, "minibatch_size": 30, "full_eval_interval": 5},
            "seed": 5
        }),
    );
    let store = dir.path().join("store.jsonl");
    let first = dir.path().join("first");
    assert!(promptforge(&[
        "optimize",
        "--config",
        &config,
        "--out",
        first.to_str().unwrap(),
        "--demo-store",
        store.to_str().unwrap(),
    ])
    .status
    .success());
    assert!(store.exists(), "store persisted for reuse");
    let second = dir.path().join("second");
    assert!(promptforge(&[
        "optimize",
        "--config",
        &config,
        "--out",
        second.to_str().unwrap(),
        "--demo-store",
        store.to_str().unwrap(),
    ])
    .status
    .success());
    let a = std::fs::read(first.join("trials.jsonl")).unwrap();
    let b = std::fs::read(second.join("trials.jsonl")).unwrap();
    assert_eq!(a, b, "reused store reproduces the run");
}
