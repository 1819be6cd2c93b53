use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mergesearch::evaluator::make_synthetic_family;
use mergesearch::mf_optimizer::load_trial_log;
use mergesearch::tensor_store::{load_store, save_store};
use serde_json::{json, Value};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mergesearch")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes `base`, `m0..` of a synthetic family to `dir`.
fn write_family(dir: &Path, layers: usize, models: usize) {
    let family = make_synthetic_family(layers, 4, models, 17).unwrap();
    for (id, store) in family.stores() {
        save_store(store, dir.join(format!("{id}.safetensors"))).unwrap();
    }
}

fn model_arg(dir: &Path, id: &str, file: &str) -> String {
    format!("{id}={}", dir.join(format!("{file}.safetensors")).display())
}

fn write_json(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn run_config(out: &Path, t_max: usize, tasks: &[&str]) -> Value {
    json!({
        "space": "lfs",
        "lfs": {"groups": 2, "components": 1},
        "schedule": {"b_min": 20, "b_max": 180, "eta": 3},
        "objectives": {"tasks": tasks},
        "t_max": t_max,
        "seed": 3,
        "workers": 2,
        "evaluator": {"kind": "synthetic", "layers": 4, "dim": 4, "models": 2, "seed": 5},
        "output_dir": out,
    })
}

#[test]
fn merges_the_math_recipe_fixture() {
    let dir = tempfile::tempdir().unwrap();
    write_family(dir.path(), 40, 3);
    let out = dir.path().join("merged.safetensors");
    let o = run(&[
        "merge",
        fixture("math_lfs_recipe.json").to_str().unwrap(),
        "--model",
        &model_arg(dir.path(), "base", "base"),
        "--model",
        &model_arg(dir.path(), "math", "m0"),
        "--model",
        &model_arg(dir.path(), "code", "m1"),
        "--model",
        &model_arg(dir.path(), "lm", "m2"),
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("4 groups over 40 layers"), "{text}");
    for range in ["0-9", "10-19", "20-29", "30-39"] {
        assert!(text.contains(&format!("layers {range}")), "{text}");
    }
    let merged = load_store(&out).unwrap();
    let base = load_store(dir.path().join("base.safetensors")).unwrap();
    assert!(merged.same_architecture(&base));
    assert_ne!(merged, base.renamed("merged"));
}

#[test]
fn merge_reports_missing_models() {
    let dir = tempfile::tempdir().unwrap();
    write_family(dir.path(), 40, 3);
    let o = run(&[
        "merge",
        fixture("math_lfs_recipe.json").to_str().unwrap(),
        "--model",
        &model_arg(dir.path(), "base", "base"),
        "--model",
        &model_arg(dir.path(), "math", "m0"),
        "-o",
        dir.path().join("x.safetensors").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("`code`") && err.contains("`lm`"), "{err}");
}

#[test]
fn identity_recipe_reproduces_the_base() {
    let dir = tempfile::tempdir().unwrap();
    write_family(dir.path(), 4, 2);
    let recipe = json!({
        "base_model": "base",
        "component_count": 3,
        "groups": [{"range": [0, 3], "cells": {
            "mlp": {"method": "task_arithmetic", "params": {"lambda": 0.0}, "sources": ["m0"]},
            "att": {"method": "task_arithmetic", "params": {"lambda": 0.0}, "sources": ["m1"]},
            "other": {"method": "ties", "params": {"lambda": 0.0, "k": 0.5}, "sources": ["m0", "m1"]}
        }}]
    });
    write_json(&dir.path().join("r.json"), &recipe);
    let out = dir.path().join("o.safetensors");
    let o = run(&[
        "merge",
        dir.path().join("r.json").to_str().unwrap(),
        "--models-dir",
        dir.path().to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = std::fs::read(&out).unwrap();
    let b = std::fs::read(dir.path().join("base.safetensors")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn search_writes_log_and_incumbent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    write_json(&dir.path().join("c.json"), &run_config(&out, 50, &[]));
    let o = run(&["search", dir.path().join("c.json").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = load_trial_log(out.join("trials.jsonl")).unwrap();
    assert_eq!(log.len(), 50);
    let inc: Value = serde_json::from_str(&std::fs::read_to_string(out.join("incumbent.json")).unwrap()).unwrap();
    assert!(inc.get("groups").is_some());
    assert!(out.join("models/base.safetensors").exists());
    assert!(out.join("run_config.json").exists());

    // the incumbent recipe is directly mergeable
    let merged = out.join("inc.safetensors");
    let o = run(&[
        "merge",
        out.join("incumbent.json").to_str().unwrap(),
        "--models-dir",
        out.join("models").to_str().unwrap(),
        "-o",
        merged.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn multi_objective_search_writes_pareto_set() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    write_json(&dir.path().join("c.json"), &run_config(&out, 60, &["m0", "m1"]));
    let o = run(&["search", dir.path().join("c.json").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pareto: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(out.join("pareto.json")).unwrap()).unwrap();
    assert!(!pareto.is_empty());
    for e in &pareto {
        assert_eq!(e["budget"], 180);
        assert_eq!(e["costs"].as_array().unwrap().len(), 2);
    }
    assert!(!out.join("incumbent.json").exists());
}

#[test]
fn resume_adds_only_the_missing_trials() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("c.json");
    write_json(&cfg, &run_config(&out, 30, &[]));
    assert!(run(&["search", cfg.to_str().unwrap()]).status.success());
    let log = out.join("trials.jsonl");
    let before = std::fs::read_to_string(&log).unwrap();
    let o = run(&["search", cfg.to_str().unwrap(), "--t-max", "50", "--resume", log.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("50 trials (20 new"), "{}", stdout(&o));
    let after = std::fs::read_to_string(&log).unwrap();
    assert!(after.starts_with(&before));
    assert_eq!(load_trial_log(&log).unwrap().len(), 50);
}

#[test]
fn report_reproduces_fixture_distribution() {
    let o = run(&["report", fixture("math_lfs_trials.jsonl").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for pct in ["52.6%", "30.4%", "17.0%"] {
        assert!(text.contains(pct), "{text}");
    }
    let o = run(&["report", fixture("gen_dis1_trials.jsonl").to_str().unwrap()]);
    let text = stdout(&o);
    let first_row = text.lines().nth(1).unwrap();
    assert_eq!(first_row.split_whitespace().next(), Some("0"), "{text}");
}

#[test]
fn report_rejects_an_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("t.jsonl");
    std::fs::write(&log, "").unwrap();
    let o = run(&["report", log.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no records"), "{}", stderr(&o));
}

#[test]
fn validate_fixtures_and_bad_documents() {
    for name in ["gen_dis0_plan.json", "gen_dis1_plan.json", "math_lfs_recipe.json"] {
        let o = run(&["validate", fixture(name).to_str().unwrap(), "--layers", "40"]);
        assert!(o.status.success(), "{name}: {}{}", stdout(&o), stderr(&o));
        assert!(stdout(&o).starts_with("valid "));
    }

    let dir = tempfile::tempdir().unwrap();
    let dis = json!({
        "base_model": "base", "models": ["a", "b"], "layer_count": 2, "depth": 1, "repeat": 1,
        "blocks": [
            {"selection": [1, 0], "perm_index": 2, "scale": 1.0},
            {"selection": [0, 0], "perm_index": 0, "scale": 1.0}
        ]
    });
    write_json(&dir.path().join("dis.json"), &dis);
    let o = run(&["validate", dir.path().join("dis.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("perm_index 2 >= P = 2"), "{}", stdout(&o));

    let recipe = json!({
        "base_model": "base", "component_count": 1,
        "groups": [{"range": [0, 1], "cells": {"layer": {"method": "slerp", "params": {"t": 0.5}, "sources": ["a", "b", "c"]}}}]
    });
    write_json(&dir.path().join("r.json"), &recipe);
    let o = run(&["validate", dir.path().join("r.json").to_str().unwrap(), "--layers", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).to_lowercase().contains("slerp"), "{}", stdout(&o));

    std::fs::write(dir.path().join("junk.json"), "{\"hello\": 1}").unwrap();
    assert_eq!(run(&["validate", dir.path().join("junk.json").to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn dis_merge_emits_a_plan() {
    let dir = tempfile::tempdir().unwrap();
    write_family(dir.path(), 2, 2);
    let dis = json!({
        "base_model": "base", "models": ["m0", "m1"], "layer_count": 2, "depth": 1, "repeat": 1,
        "blocks": [
            {"selection": [1, 1], "priorities": [0.2, 0.8], "scale": 1.25},
            {"selection": [0, 0], "perm_index": 0, "scale": 1.0}
        ]
    });
    write_json(&dir.path().join("dis.json"), &dis);
    let plan = dir.path().join("plan.json");
    let o = run(&[
        "merge",
        dir.path().join("dis.json").to_str().unwrap(),
        "--models-dir",
        dir.path().to_str().unwrap(),
        "-o",
        plan.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let p: Value = serde_json::from_str(&std::fs::read_to_string(&plan).unwrap()).unwrap();
    assert_eq!(p["blocks"][0]["layers"][0]["model"], "m1");
    assert_eq!(p["blocks"][0]["layers"][1]["model"], "m0");
    assert_eq!(p["blocks"][1]["layers"][0]["model"], "base");
    assert_eq!(p["blocks"][0]["scale"], 1.25);
    let o = run(&["validate", plan.to_str().unwrap(), "--models-dir", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stdout(&o));
}
