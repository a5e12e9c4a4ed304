//! End-to-end tests of the `tfm` binary: exit-code contract and a reduced
//! three-phase pipeline driven entirely through the CLI.

use std::path::Path;
use std::process::{Command, Output};

use tfm_core::data::{generate_synthetic, SyntheticSpec};

fn tfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfm"))
        .args(args)
        .output()
        .expect("spawn tfm")
}

fn small_dataset(dir: &Path) -> std::path::PathBuf {
    let spec = SyntheticSpec {
        train_per_class: 4,
        val_per_class: 1,
        test_per_class: 2,
        ..Default::default()
    };
    generate_synthetic(&spec, 0, dir).unwrap();
    dir.join("manifest.jsonl")
}

const SMALL_CONFIG: &str = r#"
[tokenizer]
codebook_size = 128
width = 32
heads = 4

[encoder]
layers = 2
heads = 4
width = 32
vocab = 128

[train]
batch = 8
tokenizer_epochs = 2
mtp_epochs = 2
finetune_epochs = 2
"#;

#[test]
fn unknown_command_and_flag_exit_2() {
    let out = tfm(&["warp-speed"]);
    assert_eq!(out.status.code(), Some(2));
    let out = tfm(&["gen-synth", "--out", "/tmp/x", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn missing_tokenizer_ckpt_flag_exits_3_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let out = tfm(&[
        "pretrain-encoder",
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--tokenizer-ckpt"), "stderr: {err}");
    assert_eq!(err.trim().lines().count(), 1, "single-line error: {err}");
}

#[test]
fn invalid_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nbatch = 8\nturbo = true\n").unwrap();
    let out = tfm(&[
        "pretrain-tokenizer",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn three_phase_pipeline_produces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let manifest = manifest.to_str().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, SMALL_CONFIG).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let out_dir = dir.path().join("run");
    let out = out_dir.to_str().unwrap();

    let run = |args: &[&str]| {
        let o = tfm(args);
        assert!(
            o.status.success(),
            "{:?} failed: {}",
            args[0],
            String::from_utf8_lossy(&o.stderr)
        );
    };
    run(&["pretrain-tokenizer", "--config", cfg, "--data", manifest, "--out", out, "--channel-cap", "1"]);
    let tok = out_dir.join("tokenizer.tfmc");
    assert!(tok.exists());
    let tok = tok.to_str().unwrap();
    run(&["tokenize", "--config", cfg, "--data", manifest, "--out", out, "--tokenizer-ckpt", tok]);
    for split in ["train", "val", "test"] {
        assert!(out_dir.join(format!("tokens_{split}.jsonl")).exists());
    }
    run(&["pretrain-encoder", "--config", cfg, "--data", manifest, "--out", out, "--tokenizer-ckpt", tok]);
    let enc = out_dir.join("encoder.tfmc");
    assert!(enc.exists());
    run(&[
        "finetune", "--config", cfg, "--data", manifest, "--out", out,
        "--tokenizer-ckpt", tok, "--ckpt", enc.to_str().unwrap(),
    ]);
    let cls = out_dir.join("classifier.tfmc");
    assert!(cls.exists());
    run(&[
        "evaluate", "--config", cfg, "--data", manifest, "--out", out,
        "--tokenizer-ckpt", tok, "--ckpt", cls.to_str().unwrap(),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    for key in ["balanced_accuracy", "kappa", "weighted_f1"] {
        assert!(report["values"][key].is_number(), "missing {key}: {report}");
    }
    run(&["analyze-tokens", "--config", cfg, "--data", manifest, "--out", out, "--tokenizer-ckpt", tok]);
    let token_report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("token_report.json")).unwrap())
            .unwrap();
    assert!(token_report["values"]["token_utilization_pct"].is_number());
    // every stage appended to the metrics log
    let metrics = std::fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().count() >= 6 + 3);
}

#[test]
fn same_seed_token_dumps_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let manifest = manifest.to_str().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, SMALL_CONFIG).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let mut dumps = Vec::new();
    for run_dir in ["a", "b"] {
        let out_dir = dir.path().join(run_dir);
        let out = out_dir.to_str().unwrap();
        let o = tfm(&[
            "pretrain-tokenizer", "--config", cfg, "--data", manifest, "--out", out,
            "--channel-cap", "1", "--seed", "7",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let tok = out_dir.join("tokenizer.tfmc");
        let o = tfm(&[
            "tokenize", "--config", cfg, "--data", manifest, "--out", out,
            "--tokenizer-ckpt", tok.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        dumps.push(std::fs::read(out_dir.join("tokens_test.jsonl")).unwrap());
    }
    assert_eq!(dumps[0], dumps[1]);
}
