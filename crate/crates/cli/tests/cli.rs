use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const CONFIG: &str = "\
[domain]
tag = \"synthetic\"

[embedding]
dim = 8

[train]
learning_rate = 0.5
max_epochs = 2
";

fn cdrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdrec"))
        .current_dir(dir)
        .args(["--config", "cdrec.toml", "--data", "data"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cdrec(dir, args);
    assert!(
        out.status.success(),
        "cdrec {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn failure(dir: &Path, args: &[&str]) -> String {
    let out = cdrec(dir, args);
    assert!(!out.status.success(), "cdrec {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn workspace() -> TempDir {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("cdrec.toml"), CONFIG).unwrap();
    tmp
}

/// synth -> ingest -> embed-items -> train in a fresh directory.
fn prepared(seed: &str) -> TempDir {
    let tmp = workspace();
    let d = tmp.path();
    ok(
        d,
        &[
            "--seed",
            seed,
            "synth",
            "--out",
            "raw",
            "--items",
            "200",
            "--tags",
            "6",
            "--users",
            "30",
            "--max-len",
            "20",
        ],
    );
    ok(
        d,
        &[
            "ingest",
            "--catalog",
            "raw/catalog.tsv",
            "--interactions",
            "raw/interactions.tsv",
            "--queries",
            "raw/queries.tsv",
        ],
    );
    ok(d, &["embed-items"]);
    ok(d, &["--seed", seed, "train", "--encoder", "attention"]);
    tmp
}

#[test]
fn reruns_write_identical_artifacts() {
    let a = prepared("3");
    let b = prepared("3");
    for d in [a.path(), b.path()] {
        ok(d, &["eval"]);
        ok(d, &["agreement"]);
    }
    for name in [
        "catalog.tsv",
        "interactions.tsv",
        "tag_index.json",
        "embeddings.bin",
        "params.bin",
        "loss_trace.json",
        "metrics.json",
        "agreement.json",
    ] {
        let x = fs::read(a.path().join("data").join(name)).unwrap();
        let y = fs::read(b.path().join("data").join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn same_seed_gives_the_same_loss_trace() {
    let tmp = prepared("7");
    let d = tmp.path();
    let first = fs::read(d.join("data/loss_trace.json")).unwrap();
    ok(d, &["--seed", "7", "train", "--encoder", "attention"]);
    assert_eq!(first, fs::read(d.join("data/loss_trace.json")).unwrap());
    ok(d, &["--seed", "8", "train", "--encoder", "attention"]);
    assert_ne!(first, fs::read(d.join("data/loss_trace.json")).unwrap());
}

#[test]
fn simulate_prints_an_explanation_only_when_on() {
    let tmp = prepared("1");
    let d = tmp.path();
    let off = ok(d, &["--explain", "off", "simulate", "--user", "user0000"]);
    assert!(off.contains("recommendations:"));
    assert!(!off.contains("explanation:"));
    let on = ok(d, &["--explain", "on", "simulate", "--user", "user0000"]);
    assert!(on.contains("explanation:"));
}

#[test]
fn presets_fix_the_plan() {
    let tmp = prepared("1");
    let d = tmp.path();
    let out = ok(d, &["--preset", "v2", "simulate", "--user", "user0001"]);
    assert!(out.contains("plan: alpha=1.00 beta=0.50 encoder=attention"), "{out}");
    let out = ok(d, &["--preset", "v5", "simulate", "--user", "user0001"]);
    assert!(out.contains("encoder=graph"), "{out}");
    ok(
        d,
        &["--preset", "v2", "eval", "--scope", "serving", "--metrics", "v2.json"],
    );
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("v2.json")).unwrap()).unwrap();
    assert_eq!(report["label"], "synthetic / v2 / serving");
    assert!(report.get("ms_per_sample").is_none());
}

#[test]
fn eval_separates_metrics_from_timing() {
    let tmp = prepared("2");
    let d = tmp.path();
    let table = ok(d, &["eval"]);
    assert!(table.contains("HR@10"));
    let latency: serde_json::Value = serde_json::from_slice(&fs::read(d.join("data/latency.json")).unwrap()).unwrap();
    assert!(latency["ms_per_sample"].as_f64().unwrap() > 0.0);
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(d.join("data/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["overall"]["users"], 30);
}

#[test]
fn duplicate_item_ids_are_rejected_at_ingest() {
    let tmp = workspace();
    let d = tmp.path();
    ok(
        d,
        &["synth", "--out", "raw", "--items", "50", "--tags", "3", "--users", "5"],
    );
    let catalog = fs::read_to_string(d.join("raw/catalog.tsv")).unwrap();
    let last = catalog.lines().last().unwrap().to_string();
    fs::write(d.join("raw/catalog.tsv"), format!("{catalog}{last}\n")).unwrap();
    let err = failure(
        d,
        &[
            "ingest",
            "--catalog",
            "raw/catalog.tsv",
            "--interactions",
            "raw/interactions.tsv",
        ],
    );
    assert!(err.to_lowercase().contains("duplicate"), "{err}");
    assert!(!d.join("data/catalog.tsv").exists());
}

#[test]
fn dim_above_the_item_count_is_a_rank_error() {
    let tmp = workspace();
    let d = tmp.path();
    ok(
        d,
        &[
            "synth",
            "--out",
            "raw",
            "--items",
            "12",
            "--tags",
            "3",
            "--users",
            "4",
            "--max-len",
            "6",
        ],
    );
    ok(
        d,
        &[
            "ingest",
            "--catalog",
            "raw/catalog.tsv",
            "--interactions",
            "raw/interactions.tsv",
        ],
    );
    let err = failure(d, &["--dim", "32", "embed-items"]);
    assert!(err.contains("rank"), "{err}");
}

#[test]
fn missing_artifacts_name_the_stage_to_run() {
    let tmp = workspace();
    let d = tmp.path();
    assert!(failure(d, &["embed-items"]).contains("cdrec ingest"));
    ok(
        d,
        &["synth", "--out", "raw", "--items", "60", "--tags", "3", "--users", "6"],
    );
    ok(
        d,
        &[
            "ingest",
            "--catalog",
            "raw/catalog.tsv",
            "--interactions",
            "raw/interactions.tsv",
        ],
    );
    assert!(failure(d, &["train"]).contains("cdrec embed-items"));
    ok(d, &["embed-items"]);
    assert!(failure(d, &["eval"]).contains("cdrec train"));
}

#[test]
fn config_prints_effective_values() {
    let tmp = workspace();
    let out = ok(tmp.path(), &["--k", "7", "--latency-profile", "wan", "config"]);
    let value: toml::Table = out.parse().unwrap();
    assert_eq!(value["session"]["k"].as_integer(), Some(7));
    assert_eq!(value["embedding"]["dim"].as_integer(), Some(8));
    assert_eq!(value["train"]["learning_rate"].as_float(), Some(0.5));
}
