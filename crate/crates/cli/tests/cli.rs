use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL_CIRCLES: &str = r#"
[data]
seed = 7

[data.circles]
n = 64
height = 16
width = 16

[train]
seed = 3
latent_dim = 2
arities = [2, 2, 2]
epochs = EPOCHS
batch_size = 16

[train.pretrain]
epochs = 2

[[train.modalities]]
name = "image"
encoder_hidden = [16]

[train.modalities.decoder]
kind = "shared"
hidden = [16]
variance = { kind = "learned", floor = 1e-3 }
"#;

fn dagmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dagmix"))
        .args(args)
        .env("DAGMIX_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, epochs: usize) -> PathBuf {
    let path = dir.join(format!("cfg_{epochs}.toml"));
    fs::write(&path, SMALL_CIRCLES.replace("EPOCHS", &epochs.to_string())).unwrap();
    path
}

fn generate(dir: &Path, name: &str) -> PathBuf {
    let cfg = write_config(dir, 2);
    let out = dir.join(name);
    let o = dagmix(&["generate", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn sample_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn generate_writes_one_file_per_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), "data");
    let files = sample_files(&data.join("image"));
    assert_eq!(files.len(), 64);
    assert!(files[0].ends_with("00000.bin"));
    let labels = fs::read_to_string(data.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 65);
    assert!(labels.starts_with("index,hue,radius,shift,r,s"));
}

#[test]
fn generate_is_byte_identical_on_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let a = generate(tmp.path(), "a");
    let b = generate(tmp.path(), "b");
    for (fa, fb) in sample_files(&a.join("image")).iter().zip(sample_files(&b.join("image"))) {
        assert_eq!(fs::read(fa).unwrap(), fs::read(fb).unwrap());
    }
    assert_eq!(fs::read(a.join("labels.csv")).unwrap(), fs::read(b.join("labels.csv")).unwrap());
    assert_eq!(fs::read(a.join("dataset.json")).unwrap(), fs::read(b.join("dataset.json")).unwrap());
}

#[test]
fn empty_dataset_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("zero.toml");
    fs::write(&cfg, "[data.circles]\nn = 0\n").unwrap();
    let o = dagmix(&["generate", "--config", p(&cfg), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n must be at least 1"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("typo.toml");
    fs::write(&cfg, "[data]\nsed = 1\n").unwrap();
    let o = dagmix(&["generate", "--config", p(&cfg), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_epochs_still_exports_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), "data");
    let cfg = write_config(tmp.path(), 0);
    let run = tmp.path().join("run");
    let o = dagmix(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["run.json", "checkpoint.json", "config.json", "latent.csv", "clusters/gmm.csv", "decoded/image.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap(), "");
    let latent = fs::read_to_string(run.join("latent.csv")).unwrap();
    assert_eq!(latent.lines().count(), 65);
    assert!(latent.lines().next().unwrap().starts_with("index,mu1,mu2,var1,var2,cluster,N1,N2,N3,hue"));
}

#[test]
fn training_writes_per_epoch_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), "data");
    let cfg = write_config(tmp.path(), 3);
    let run = tmp.path().join("run");
    let o = dagmix(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 3);
    for e in 0..3 {
        let dot = fs::read_to_string(run.join(format!("dags/epoch_{e:04}.dot"))).unwrap();
        assert!(dot.starts_with("digraph"));
    }
    for l in 1..=3 {
        assert!(run.join(format!("clusters/node_{l}.csv")).exists());
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["final_metrics"]["epoch"], 2);
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), "data");
    let cfg = write_config(tmp.path(), 1);
    let run = tmp.path().join("run");
    let o = dagmix(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--seed", "11"]);
    assert!(o.status.success());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), "data");
    let cfg = write_config(tmp.path(), 4);
    let full = tmp.path().join("full");
    let part = tmp.path().join("part");
    let o = dagmix(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&full)]);
    assert!(o.status.success());
    let o = dagmix(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&part), "--epochs", "2"]);
    assert!(o.status.success());
    let ck = part.join("checkpoint-2.json");
    fs::copy(part.join("checkpoint.json"), &ck).unwrap();
    let o = dagmix(&["train", "--resume", p(&ck), "--data", p(&data), "--out", p(&part), "--epochs", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.jsonl", "checkpoint.json", "latent.csv", "clusters/gmm.csv", "decoded/image.csv"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(part.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn mismatched_modality_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), "data");
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, SMALL_CIRCLES.replace("EPOCHS", "1").replace("name = \"image\"", "name = \"audio\"")).unwrap();
    let o = dagmix(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&tmp.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), 1);
    let o = dagmix(&["train", "--config", p(&cfg), "--data", p(&tmp.path().join("nope")), "--out", p(&tmp.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_summarizes_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), "data");
    let cfg = write_config(tmp.path(), 1);
    let run = tmp.path().join("run");
    assert!(dagmix(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]).status.success());
    let o = dagmix(&["report", "--run", p(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("samples: 64"));
    assert!(text.contains("factor hue"));
    assert!(run.join("report.json").exists());
    assert_eq!(fs::read_to_string(run.join("report.txt")).unwrap(), text);
}

#[test]
fn report_without_artifacts_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dagmix(&["report", "--run", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_the_numerical_code() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), "data");
    let cfg = tmp.path().join("wild.toml");
    let text = SMALL_CIRCLES
        .replace("EPOCHS", "2")
        .replace("batch_size = 16", "batch_size = 16\nlearning_rate = 1e300\noptimizer = \"sgd\"");
    fs::write(&cfg, text).unwrap();
    let o = dagmix(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&tmp.path().join("run"))]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("numerical fault"));
}
