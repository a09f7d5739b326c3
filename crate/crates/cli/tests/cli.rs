use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn unravel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unravel")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

fn write_config(dir: &Path, regime: &str, epochs: usize) -> PathBuf {
    let path = dir.join("config.json");
    let cfg = serde_json::json!({
        "epochs": epochs, "batch_size": 64, "lr": 0.02, "lr_decay": 0.1,
        "milestones": [], "momentum": 0.9, "weight_decay": 0.0001,
        "seed": 1, "regime": regime,
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 6-block net trained for two epochs, shared by the tests below.
fn small_checkpoint() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    let dir = DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "standard", 2);
        let out = dir.path().join("train");
        let o = unravel(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "3", "--blocks", "6", "--width", "8"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        dir
    });
    Box::leak(dir.path().join("train/checkpoint.json").into_boxed_path())
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&unravel(&["--help"])), 0);
    assert_eq!(code(&unravel(&["--version"])), 0);
    assert_eq!(code(&unravel(&["bogus"])), 1);
    // missing --seed
    assert_eq!(code(&unravel(&["train", "--out", s(&out)])), 1);
    // missing --out
    assert_eq!(code(&unravel(&["paths", "--n", "4"])), 1);
    assert_eq!(code(&unravel(&["--jobs", "0", "paths", "--n", "4", "--out", s(&out)])), 1);
    assert_eq!(code(&unravel(&["lesion", "--checkpoint", "/nonexistent.json", "--out", s(&out), "--seed", "1"])), 1);
}

#[test]
fn corrupt_checkpoint_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.json");
    fs::write(&ckpt, "{\"format\": 1, \"model\": {").unwrap();
    let out = dir.path().join("o");
    let o = unravel(&["lesion", "--checkpoint", s(&ckpt), "--out", s(&out), "--seed", "1"]);
    assert_eq!(code(&o), 1);
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn bad_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dropout", 1);
    let out = dir.path().join("o");
    let o = unravel(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "1"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("regime"));

    let cfg = write_config(dir.path(), "effective_paths", 1);
    assert_eq!(code(&unravel(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "1"])), 1);

    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v["regime"] = "standard".into();
    v["colour"] = "blue".into();
    fs::write(&cfg, v.to_string()).unwrap();
    let o = unravel(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "1"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn train_writes_checkpoint_history_and_manifest() {
    let dir = small_checkpoint().parent().unwrap();
    let history = rows(&dir.join("history.csv"));
    assert_eq!(history.len(), 2);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "train");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["seed"], 3);
}

#[test]
fn single_lesion_has_a_baseline_and_one_row_per_block() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = unravel(&["lesion", "--checkpoint", s(small_checkpoint()), "--out", s(&out), "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&out.join("lesion.csv"));
    let blocks: Vec<&str> = r.iter().map(|r| &r[0]).collect();
    assert_eq!(blocks, ["-1", "0", "1", "2", "3", "4", "5"]);
}

#[test]
fn multi_lesion_row_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = unravel(&["lesion", "--checkpoint", s(small_checkpoint()), "--mode", "multi", "--k", "1,3,5", "--trials", "25", "--out", s(&out), "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&out.join("lesion.csv"));
    assert_eq!(r.len(), 75);
    for k in ["1", "3", "5"] {
        assert_eq!(r.iter().filter(|r| &r[0] == k).count(), 25);
    }
    // more deletions than blocks
    let o = unravel(&["lesion", "--checkpoint", s(small_checkpoint()), "--mode", "multi", "--k", "7", "--out", s(&out), "--seed", "2"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn reorder_rows_and_identity() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = unravel(&["reorder", "--checkpoint", s(small_checkpoint()), "--swaps", "1,5,10,20", "--out", s(&out), "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&out.join("reorder.csv"));
    assert_eq!(r.len(), 100);
    for row in &r {
        let tau: f64 = row[2].parse().unwrap();
        assert!((-1.0..=1.0).contains(&tau));
    }

    let lesion_out = dir.path().join("l");
    unravel(&["lesion", "--checkpoint", s(small_checkpoint()), "--out", s(&lesion_out), "--seed", "4"]);
    let baseline = rows(&lesion_out.join("lesion.csv"))[0][1].to_string();
    let o = unravel(&["reorder", "--checkpoint", s(small_checkpoint()), "--swaps", "0", "--trials", "3", "--out", s(&out), "--seed", "4"]);
    assert_eq!(code(&o), 0);
    for row in rows(&out.join("reorder.csv")) {
        assert_eq!(&row[2], "1");
        assert_eq!(row[3], baseline);
    }
}

#[test]
fn three_stage_reorder_needs_stage_local() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "standard", 1);
    let train_out = dir.path().join("t");
    let o = unravel(&["train", "--config", s(&cfg), "--arch", "three-stage", "--blocks", "6", "--out", s(&train_out), "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = train_out.join("checkpoint.json");
    let out = dir.path().join("o");
    assert_eq!(code(&unravel(&["reorder", "--checkpoint", s(&ckpt), "--swaps", "2", "--trials", "2", "--out", s(&out), "--seed", "1"])), 1);
    let o = unravel(&["reorder", "--checkpoint", s(&ckpt), "--swaps", "2", "--trials", "2", "--stage-local", "--out", s(&out), "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(rows(&out.join("reorder.csv")).len(), 2);
}

fn binomial(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

#[test]
fn gradflow_mass_is_pmf_times_mean_norm() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = unravel(&["gradflow", "--checkpoint", s(small_checkpoint()), "--samples", "8", "--batch-size", "32", "--out", s(&out), "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&out.join("gradflow.csv"));
    let ks: Vec<u64> = r.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(ks, [0, 2, 4, 6]);
    let mut total = 0.0;
    for row in &r {
        let k: u64 = row[0].parse().unwrap();
        let mean: f64 = row[2].parse().unwrap();
        let raw: f64 = row[5].parse().unwrap();
        let want = binomial(6, k) / 64.0 * mean;
        assert!((raw - want).abs() <= 1e-12 * want.max(1e-300), "k={k}: {raw} vs {want}");
        total += raw;
    }
    for row in &r {
        let raw: f64 = row[5].parse().unwrap();
        let norm: f64 = row[6].parse().unwrap();
        assert!((norm - raw / total).abs() < 1e-12);
    }
    // lengths past n are rejected
    assert_eq!(code(&unravel(&["gradflow", "--checkpoint", s(small_checkpoint()), "--lengths", "0,9", "--out", s(&out), "--seed", "5"])), 1);
}

#[test]
fn paths_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = unravel(&["paths", "--n", "10", "--deleted", "3", "--band", "3,7", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pmf = rows(&out.join("pmf.csv"));
    assert_eq!(pmf.len(), 11);
    for row in &pmf {
        let k: u64 = row[0].parse().unwrap();
        assert_eq!(row[1].parse::<f64>().unwrap(), binomial(10, k));
        assert!((row[2].parse::<f64>().unwrap() - binomial(10, k) / 1024.0).abs() < 1e-15);
    }
    for row in rows(&out.join("remaining.csv")) {
        let x: u64 = row[0].parse().unwrap();
        let d: u64 = row[1].parse().unwrap();
        let want = if x > 10 - d { 0.0 } else { binomial(10 - d, x) / binomial(10, x) };
        assert!((row[2].parse::<f64>().unwrap() - want).abs() < 1e-12);
    }
    let band = rows(&out.join("band.csv"));
    let want: f64 = (3..=7).map(|k| binomial(10, k)).sum::<f64>() / 1024.0;
    assert!((band[0][2].parse::<f64>().unwrap() - want).abs() < 1e-12);
}

#[test]
fn replay_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let o = unravel(&["lesion", "--checkpoint", s(small_checkpoint()), "--mode", "multi", "--k", "2", "--trials", "4", "--out", s(&first), "--seed", "9"]);
    assert_eq!(code(&o), 0);
    let second = dir.path().join("b");
    let o = unravel(&["replay", s(&first.join("manifest.json")), "--out", s(&second)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(first.join("lesion.csv")).unwrap(), fs::read(second.join("lesion.csv")).unwrap());
}
