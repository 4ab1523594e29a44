use std::fs;
use std::path::Path;
use std::process::Command as Process;

use contrast_lab_cli::{compare_rows, run, Command, CompareConfig, Exit, Invocation};
use tempfile::TempDir;

fn bin() -> Process {
    Process::new(env!("CARGO_BIN_EXE_contrast-lab"))
}

fn write(dir: &Path, name: &str, json: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, json).unwrap();
    path
}

fn invocation(dir: &TempDir, out: &str, config: Option<&Path>) -> Invocation {
    let mut inv = Invocation::new(dir.path().join(out));
    inv.config = config.map(Path::to_path_buf);
    inv
}

fn parse_csv(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

const SMALL_TRAIN: &str = r#"{
  "data": {"kind": "synthetic", "classes": 3, "per_class": 8, "dim": 6, "spread_sigma": 0.1, "seed": 1},
  "augment": {"noise_sigma": 0.1, "dropout_prob": 0.0, "seed": 1},
  "train": {"batch_size": 4, "epochs": 2, "eval_k": 5, "out_dim": 4, "seed": 1},
  "snapshot": true
}"#;

#[test]
fn verify_default_reports_the_single_known_failure() {
    let dir = TempDir::new().unwrap();
    let out = bin()
        .args(["verify", "--out"])
        .arg(dir.path().join("v"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let failing: Vec<&str> = stdout.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert_eq!(failing.len(), 1, "{stdout}");
    assert!(failing[0].contains("monotonicity/hardness_ratio_tends_to_one"));
    for f in ["config.json", "report.json", "manifest.json"] {
        assert!(dir.path().join("v").join(f).exists(), "{f}");
    }
}

#[test]
fn verify_impossible_tolerance_fails() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "v.json", r#"{"rel_tol": 1e-12, "abs_tol": 1e-300, "dims": [8], "ks": [4], "taus": [0.1]}"#);
    let inv = invocation(&dir, "v", Some(&cfg));
    assert_eq!(run(Command::Verify, &inv), Exit::Failure);
}

#[test]
fn missing_or_invalid_config_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.json");
    for command in [Command::Verify, Command::Analyze, Command::Train, Command::Compare] {
        let inv = invocation(&dir, "x", Some(&missing));
        assert_eq!(run(command, &inv), Exit::Usage);
    }
    let unknown = write(dir.path(), "bad.json", r#"{"no_such_field": 1}"#);
    assert_eq!(run(Command::Analyze, &invocation(&dir, "y", Some(&unknown))), Exit::Usage);
    let bad_tau = write(dir.path(), "tau.json", r#"{"train": {"loss": {"variant": "dcl", "temperature": {"tau0": -0.1}}}}"#);
    assert_eq!(run(Command::Train, &invocation(&dir, "z", Some(&bad_tau))), Exit::Usage);

    let status = bin().args(["analyze", "--bogus"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn analyze_symmetric_sweep_matches_closed_form() {
    let dir = TempDir::new().unwrap();
    let inv = invocation(&dir, "a", None);
    assert_eq!(run(Command::Analyze, &inv), Exit::Success);

    let tau_rows = parse_csv(&fs::read_to_string(inv.out.join("sweep_tau.csv")).unwrap());
    assert_eq!(tau_rows.len(), 61);
    for r in &tau_rows {
        let (tau, w) = (r[0], r[1]);
        let closed = 4.0 / ((2.0 / tau).exp() + 4.0);
        assert!((w - closed).abs() <= 1e-12, "tau {tau}: {w} vs {closed}");
    }

    let k_rows = parse_csv(&fs::read_to_string(inv.out.join("sweep_K.csv")).unwrap());
    assert_eq!(k_rows.len(), 21);
    assert!(k_rows.windows(2).all(|p| p[1][1] > p[0][1]));

    let entropy = parse_csv(&fs::read_to_string(inv.out.join("entropy.csv")).unwrap());
    assert!(entropy.windows(2).all(|p| p[1][1] >= p[0][1] - 1e-12));
}

#[test]
fn analyze_outputs_are_reproducible_and_not_overwritten() {
    let dir = TempDir::new().unwrap();
    let first = invocation(&dir, "a", None);
    let second = invocation(&dir, "b", None);
    assert_eq!(run(Command::Analyze, &first), Exit::Success);
    assert_eq!(run(Command::Analyze, &second), Exit::Success);
    for f in ["config.json", "sweep_tau.csv", "sweep_K.csv", "entropy.csv", "report.json"] {
        assert_eq!(
            fs::read(first.out.join(f)).unwrap(),
            fs::read(second.out.join(f)).unwrap(),
            "{f}"
        );
    }

    let before = fs::read(first.out.join("sweep_tau.csv")).unwrap();
    assert_eq!(run(Command::Analyze, &first), Exit::Usage);
    assert_eq!(fs::read(first.out.join("sweep_tau.csv")).unwrap(), before);

    let mut forced = first.clone();
    forced.force = true;
    assert_eq!(run(Command::Analyze, &forced), Exit::Success);
}

#[test]
fn train_writes_record_and_snapshot() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "t.json", SMALL_TRAIN);
    let inv = invocation(&dir, "t", Some(&cfg));
    assert_eq!(run(Command::Train, &inv), Exit::Success);
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(inv.out.join("record.json")).unwrap()).unwrap();
    for series in ["loss", "a_batch", "tau_used", "alignment_loss", "uniformity", "knn_accuracy"] {
        assert_eq!(record[series].as_array().unwrap().len(), 2, "{series}");
    }
    assert!(inv.out.join("params.bin").exists());
    assert!(inv.out.join("manifest.json").exists());
}

#[test]
fn train_zero_epochs_gives_empty_series() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "t.json", &SMALL_TRAIN.replace(r#""epochs": 2"#, r#""epochs": 0"#));
    let inv = invocation(&dir, "t", Some(&cfg));
    assert_eq!(run(Command::Train, &inv), Exit::Success);
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(inv.out.join("record.json")).unwrap()).unwrap();
    assert!(record["knn_accuracy"].as_array().unwrap().is_empty());
    assert!(record["loss"].as_array().unwrap().is_empty());
}

#[test]
fn train_divergence_exits_one() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "t.json", &SMALL_TRAIN.replace(r#""epochs": 2"#, r#""epochs": 2, "lr": 1e300"#));
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("t"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("epoch 0"));
}

#[test]
fn train_huge_but_finite_lr_still_trains() {
    // The encoder output is normalized, so a large step only inflates the
    // weights and later gradients shrink accordingly.
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "t.json", &SMALL_TRAIN.replace(r#""epochs": 2"#, r#""epochs": 2, "lr": 1e6"#));
    assert_eq!(run(Command::Train, &invocation(&dir, "t", Some(&cfg))), Exit::Success);
}

fn small_compare(variants: usize, batches: &[usize], seeds: &[u64]) -> CompareConfig {
    let mut cfg: CompareConfig = serde_json::from_str(&format!(
        r#"{{
          "data": {{"kind": "synthetic", "classes": 3, "per_class": 8, "dim": 6, "spread_sigma": 0.1}},
          "train": {{"epochs": 1, "eval_k": 5, "out_dim": 4}},
          "batch_sizes": {batches:?},
          "seeds": {seeds:?}
        }}"#
    ))
    .unwrap();
    cfg.variants.truncate(variants);
    cfg
}

#[test]
fn compare_row_counts() {
    let one = compare_rows(&small_compare(1, &[4], &[0]), Some(0)).unwrap();
    assert_eq!(one.len(), 1);
    let grid = compare_rows(&small_compare(3, &[4, 8], &[0, 1]), None).unwrap();
    assert_eq!(grid.len(), 12);
    assert_eq!(grid[0].variant, "infonce");
    assert_eq!((grid[1].batch_size, grid[1].seed), (4, 1));
    assert_eq!((grid[2].batch_size, grid[2].seed), (8, 0));
    assert_eq!(grid[11].variant, "dcl");
}

#[test]
fn compare_is_deterministic_across_thread_counts() {
    let cfg = small_compare(4, &[4], &[0, 1]);
    let sequential = compare_rows(&cfg, Some(0)).unwrap();
    let pooled = compare_rows(&cfg, Some(3)).unwrap();
    assert_eq!(sequential, pooled);

    let dir = TempDir::new().unwrap();
    let path = write(dir.path(), "c.json", &serde_json::to_string(&cfg).unwrap());
    let a = invocation(&dir, "a", Some(&path));
    let b = invocation(&dir, "b", Some(&path));
    assert_eq!(run(Command::Compare, &a), Exit::Success);
    assert_eq!(run(Command::Compare, &b), Exit::Success);
    for f in ["compare.csv", "summary.csv"] {
        assert_eq!(fs::read(a.out.join(f)).unwrap(), fs::read(b.out.join(f)).unwrap(), "{f}");
    }
    let summary = fs::read_to_string(a.out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
}

#[test]
fn compare_rejects_empty_lists() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"seeds": []}"#);
    assert_eq!(run(Command::Compare, &invocation(&dir, "c", Some(&cfg))), Exit::Usage);
}
