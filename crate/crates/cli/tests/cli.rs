use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slfr::data::Split;
use slfr::eval::{evaluate, EvalReport, LabelSource};
use slfr::train::{train_slfr, TrainConfig};

const SMALL: &str = r#"
[vae]
latent_dim = 8
hidden = 16
epochs = 3

[train]
dim = 8
epochs = 4
patience = 10
batch = 256

[synth]
n_users = 60
n_items = 80
d_true = 4
exposure_k = 10
rounds = 2

[synth.former]
dim = 4
epochs = 2
"#;

fn slfr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slfr"))
        .args(args)
        .env_remove("SLFR_SEED")
        .env_remove("SLFR_THREADS")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = slfr(args);
    assert!(
        out.status.success(),
        "slfr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Explicit ratings in 1..=5 for 30 users over 40 items.
fn write_ratings(path: &Path) {
    let mut text = String::from("user,item,value\n");
    for u in 0..30u64 {
        for i in 0..40u64 {
            let h = (u * 7919 + i * 104729 + u * i * 31) % 97;
            if h < 30 {
                text.push_str(&format!("{},{},{}\n", 100 + u, 500 + i, 1 + h % 5));
            }
        }
    }
    fs::write(path, text).unwrap();
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    fs::write(&p, SMALL).unwrap();
    p
}

fn simulated(dir: &Path) -> PathBuf {
    let cfg = small_config(dir);
    let out = dir.join("sim");
    ok(&["--config", s(&cfg), "simulate", "--out", s(&out)]);
    out
}

#[test]
fn prepare_writes_split_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("ratings.csv");
    write_ratings(&raw);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["--seed", "5", "prepare", "--input", s(&raw), "--rule", "rating_ge_4", "--out", s(out)]);
    }
    for name in ["train.csv", "valid.csv", "test.csv", "meta.json", "config.toml", "manifest.json"] {
        assert!(a.join(name).is_file(), "missing {name}");
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let config = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(config.contains("split_seed = 5"));
}

#[test]
fn bad_rule_lists_valid_rules() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("ratings.csv");
    write_ratings(&raw);
    let out = slfr(&["prepare", "--input", s(&raw), "--rule", "stars", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for rule in ["rating_ge_4", "watch_ratio_ge_2", "passthrough"] {
        assert!(err.contains(rule), "{err}");
    }
}

#[test]
fn missing_split_dir_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = slfr(&["pretrain", "--split", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\ngama = 0.5\n").unwrap();
    let out = slfr(&["--config", s(&cfg), "simulate", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pretrain_with_alpha_zero_writes_both_checkpoints_and_reps() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path());
    let cfg = small_config(dir.path());
    let out = dir.path().join("pre");
    ok(&[
        "--config", s(&cfg), "pretrain", "--split", s(&sim.join("split")), "--alpha", "0", "--out", s(&out),
    ]);
    for name in ["vae_user.json", "vae_item.json", "reps.json", "vae_user_kl.json", "manifest.json"] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
}

#[test]
fn train_gamma_zero_then_eval_matches_library_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path());
    let cfg = small_config(dir.path());
    let split_dir = sim.join("split");
    let run = dir.path().join("mf");
    let ev = dir.path().join("mf_eval");
    ok(&["--config", s(&cfg), "train", "--split", s(&split_dir), "--gamma", "0", "--out", s(&run)]);
    ok(&[
        "eval", "--model", s(&run.join("model.json")), "--split", s(&split_dir), "--Ks", "10,20,30",
        "--out", s(&ev),
    ]);
    let cli = EvalReport::load_json(&ev.join("report.json")).unwrap();

    let (split, meta) = Split::load(&split_dir).unwrap();
    let tc = TrainConfig {
        dim: 8,
        epochs: 4,
        batch: 256,
        feedback_kind: meta.feedback_kind,
        ..TrainConfig::default()
    };
    let lib = train_slfr(&split, None, &tc).unwrap();
    let expected = evaluate(&lib.model, &split, &[10, 20, 30], LabelSource::Heldout).unwrap();
    assert_eq!(cli.metrics, expected.metrics);
    assert_eq!(cli.n_users_evaluated, expected.n_users_evaluated);
}

#[test]
fn eval_with_label_file_reports_external_mode() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path());
    let cfg = small_config(dir.path());
    let run = dir.path().join("mf");
    ok(&["--config", s(&cfg), "train", "--split", s(&sim.join("split")), "--out", s(&run)]);
    let ev = dir.path().join("ev");
    ok(&[
        "eval", "--model", s(&run.join("model.json")), "--split", s(&sim.join("split")),
        "--labels", s(&sim.join("true_labels.csv")), "--out", s(&ev),
    ]);
    let report = EvalReport::load_json(&ev.join("report.json")).unwrap();
    assert_eq!(report.label_source, "external");
    assert!(report.n_users_evaluated > 0);
}

#[test]
fn gamma_sweep_on_synthetic_data_has_eleven_rows() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path());
    let cfg = small_config(dir.path());
    let out = dir.path().join("sweep");
    ok(&["--config", s(&cfg), "sweep", "--split", s(&sim.join("split")), "--param", "gamma", "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 12, "{csv}");
    assert!(lines[0].starts_with("value,gamma,best_epoch,"));

    let table = dir.path().join("table");
    ok(&["report", "--runs", s(&out), "--out", s(&table)]);
    let comparison = fs::read_to_string(table.join("comparison.csv")).unwrap();
    assert_eq!(comparison.lines().count(), 12);
}

#[test]
fn alpha_sweep_requires_positive_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path());
    let out = slfr(&[
        "sweep", "--split", s(&sim.join("split")), "--param", "alpha", "--grid", "1,5", "--gamma", "0",
        "--out", s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path());
    let cfg = small_config(dir.path());
    let out = slfr(&[
        "--config", s(&cfg), "train", "--split", s(&sim.join("split")), "--lr", "1e300", "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
