//! End-to-end runs of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[train]
batch_size = 64
max_epochs = 2
early_stop_patience = 2

[model]
d_id = 4
d_im = 12
d_te = 12
d_e = 8
hidden = 8
attention_hidden = 4
heads = 2

[src]
T = 3

[data.spec]
n_users = 120
n_items = 300
d_im = 12
d_te = 12
"#;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synergy-ctr")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn gen_data(dir: &Path, config: &str, seed: &str) -> serde_json::Value {
    let out = dir.join(format!("data-{seed}"));
    let o = cli(&["gen-data", "--config", config, "--seed", seed, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_manifest_and_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let manifest = gen_data(dir.path(), &config, "3");
    let data_dir = dir.path().join("data-3");
    for key in ["items", "train", "test"] {
        let file = manifest[key].as_str().unwrap();
        assert!(data_dir.join(file).is_file(), "{key}");
    }
    assert_eq!(std::fs::read_dir(&data_dir).unwrap().count(), 4);
    assert_eq!(manifest["checksum"].as_str().unwrap().len(), 64);
}

#[test]
fn gen_data_checksum_depends_only_on_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let a = gen_data(dir.path(), &config, "5");
    std::fs::rename(dir.path().join("data-5"), dir.path().join("first")).unwrap();
    let b = gen_data(dir.path(), &config, "5");
    let c = gen_data(dir.path(), &config, "6");
    assert_eq!(a["checksum"], b["checksum"]);
    assert_ne!(a["checksum"], c["checksum"]);
}

#[test]
fn train_then_eval_from_generated_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    gen_data(dir.path(), &config, "1");
    let manifest = dir.path().join("data-1/manifest.json");
    let run = dir.path().join("run");
    let o = cli(&[
        "train", "--config", &config, "--data", manifest.to_str().unwrap(), "--out", run.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert!((1..=2).contains(&metrics.lines().count()));
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["auc"].as_f64().unwrap() > 0.0);
    }
    let o = cli(&[
        "eval",
        "--config",
        &config,
        "--data",
        manifest.to_str().unwrap(),
        "--checkpoint",
        run.join("best.ckpt").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("auc"));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["gen-data", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(cli(&["train", "--ablation", "bogus"]).status.code(), Some(2));
    let bad = write_config(dir.path(), "[train]\nw1 = 0.9\n");
    assert_eq!(cli(&["train", "--config", &bad]).status.code(), Some(2));
    let unknown = write_config(dir.path(), "[model]\nwidth = 3\n");
    assert_eq!(cli(&["gen-data", "--config", &unknown]).status.code(), Some(2));
}

#[test]
fn tampered_data_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let manifest = gen_data(dir.path(), &config, "2");
    let train = dir.path().join("data-2").join(manifest["train"].as_str().unwrap());
    let mut text = std::fs::read_to_string(&train).unwrap();
    text.push('\n');
    std::fs::write(&train, text).unwrap();
    let path = dir.path().join("data-2/manifest.json");
    let o = cli(&["train", "--config", &config, "--data", path.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
}
