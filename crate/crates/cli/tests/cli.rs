use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use negcut::data::{write_synth_dataset, SynthConfig};
use negcut::losses::DEFAULT_TAU;
use negcut_cli::{load_config, ExperimentConfig};

const TINY: &str = r#"
run_name = "tiny"

[data]
image_size = 16

[data.synth]
size = 16
count_a = 4
count_b = 4

[train]
epochs = 1
batch_size = 2
num_patches = 8
num_negatives = 8
checkpoint_every = 1

[train.model.generator]
width = 4
n_blocks = 1
tap_layers = [1, 5, 9]

[train.model.repnet]
hidden = 8
out_dim = 8

[train.model.neggen]
noise_dim = 4
hidden = 8

[train.model.discriminator]
width = 4
n_down = 2

[embedder]
dim = 8

[ablate]
neg_generator = [true]
diversity = [true, false]
num_negatives = [8]
"#;

fn negcut(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("tiny.toml");
    if !config.exists() {
        fs::write(&config, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_negcut"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("runs"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn train(dir: &Path) -> PathBuf {
    let out = negcut(dir, &["train"]);
    assert_ok(&out);
    let run = PathBuf::from(stdout(&out).trim());
    assert_eq!(run, dir.join("runs").join("tiny"));
    run
}

fn checkpoint(run: &Path) -> PathBuf {
    run.join("checkpoints").join("epoch_0001.safetensors")
}

#[test]
fn file_then_overrides_then_cli_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, "[train]\ntau = 0.2\nepochs = 3\n").unwrap();
    let cfg = load_config(Some(&path), &["train.epochs=7".into()]).unwrap();
    let mut expected = ExperimentConfig::default();
    expected.train.tau = 0.2;
    expected.train.epochs = 7;
    assert_eq!(cfg, expected);
}

#[test]
fn snapshot_reloads_to_the_same_config() {
    let cfg = load_config(None, &["train.num_negatives=32".into(), "run_name=x".into()]).unwrap();
    let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn train_writes_metrics_checkpoint_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path());
    assert!(checkpoint(&run).is_file());
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2, "4 images at batch 2 is 2 steps");
    let snap = ExperimentConfig::from_toml(&fs::read_to_string(run.join("config.toml")).unwrap()).unwrap();
    assert_eq!(snap.train.epochs, 1);
    assert_eq!(snap.out_dir.as_deref(), Some(dir.path().join("runs").as_path()));
}

#[test]
fn eval_and_visualize_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path());
    let ckpt = checkpoint(&run);

    let out = negcut(dir.path(), &["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_ok(&out);
    let record: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(record["summary"]["frechet"].as_f64().unwrap().is_finite());
    assert!(record["summary"]["correspondence"].as_f64().is_some());
    assert!(run.join("eval.json").is_file());

    let image = dir.path().join("src.png");
    image::RgbImage::from_fn(16, 16, |x, y| image::Rgb([(x * 16) as u8, (y * 16) as u8, 128]))
        .save(&image)
        .unwrap();
    let out = negcut(
        dir.path(),
        &[
            "visualize",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--image",
            image.to_str().unwrap(),
            "--query",
            "3,4",
            "--query",
            "10,12",
            "--layer",
            "1",
        ],
    );
    assert_ok(&out);
    let files: Vec<PathBuf> = stdout(&out).lines().map(PathBuf::from).collect();
    assert_eq!(files.len(), 2 * 2 + 3);
    for f in &files {
        assert!(f.is_file(), "{}", f.display());
    }
    let tsv = fs::read_to_string(&files[1]).unwrap();
    let (lo, hi) = ((-1.0 / DEFAULT_TAU).exp(), (1.0 / DEFAULT_TAU).exp());
    let values: Vec<f64> = tsv.split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert!(!values.is_empty());
    for v in values {
        assert!(v >= lo * (1.0 - 1e-6) && v <= hi * (1.0 + 1e-6), "{v} outside [{lo}, {hi}]");
    }
}

#[test]
fn eval_of_a_domain_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_synth_dataset(
        &SynthConfig {
            size: 16,
            count_a: 4,
            count_b: 4,
            ..SynthConfig::default()
        },
        &data,
    )
    .unwrap();
    let out = negcut(
        dir.path(),
        &[
            "--set",
            &format!("data.dataset_dir={:?}", data.display().to_string()),
            "eval",
            "--generated",
            data.join("domainB").to_str().unwrap(),
        ],
    );
    assert_ok(&out);
    let record: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let fd = record["summary"]["frechet"].as_f64().unwrap();
    assert!(fd.abs() < 1e-6, "self distance {fd}");
}

#[test]
fn ablate_tabulates_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = negcut(dir.path(), &["ablate"]);
    assert_ok(&out);
    let table = stdout(&out);
    assert_eq!(table.lines().count(), 2 + 2, "{table}");
    assert!(table.contains("gen-on_div-on_n8"));
    assert!(table.contains("gen-on_div-off_n8"));
    let tsv = fs::read_to_string(dir.path().join("runs/tiny/ablation.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| negcut(dir.path(), args).status.code();
    assert_eq!(code(&["--set", "train.tua=1", "train"]), Some(2));
    assert_eq!(code(&["--set", "train.tau=-1", "train"]), Some(2));
    assert_eq!(code(&["eval"]), Some(2));
    assert_eq!(code(&["eval", "--checkpoint", "/nonexistent/x.safetensors"]), Some(4));
    let missing = Command::new(env!("CARGO_BIN_EXE_negcut"))
        .args(["--config", "/nonexistent/c.toml", "train"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(4));
}

#[test]
fn nan_abort_exits_with_runtime_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = negcut(dir.path(), &["--set", "train.lr.generator=1e30", "--set", "train.epochs=3", "train"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
