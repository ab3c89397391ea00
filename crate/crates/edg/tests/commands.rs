mod common;

use std::process::Command;

use common::{tiny_config, write_config, GAUSSIAN, MOG6};
use edg::commands::*;
use edg::formats::{read_loss_csv, read_sample_matrix};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_edg"));
    c.env("RUST_LOG", "error");
    c
}

#[test]
fn train_writes_outputs_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "g.toml", &tiny_config(GAUSSIAN, &tmp.path().join("a"), 12));
    let a = cmd_train(&TrainOptions {
        config: cfg.clone(),
        ..Default::default()
    })
    .unwrap();
    let b = cmd_train(&TrainOptions {
        config: cfg,
        out: Some(tmp.path().join("b")),
        ..Default::default()
    })
    .unwrap();
    assert_eq!(a.steps, 12);
    let la = std::fs::read(&a.loss_csv).unwrap();
    assert_eq!(la, std::fs::read(&b.loss_csv).unwrap());
    assert_eq!(read_loss_csv(&a.loss_csv).unwrap().len(), 12 - a.skipped_steps);
    let dir = tmp.path().join("a");
    for f in ["config.toml", "checkpoint.bin", "manifest.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

#[test]
fn config_echo_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "g.toml", &tiny_config(GAUSSIAN, &tmp.path().join("a"), 4));
    cmd_train(&TrainOptions {
        config: cfg,
        ..Default::default()
    })
    .unwrap();
    let echo = tmp.path().join("a/config.toml");
    let first = edg::config::ExperimentConfig::load(&echo).unwrap();
    let rerun = cmd_train(&TrainOptions {
        config: echo,
        out: Some(tmp.path().join("b")),
        ..Default::default()
    })
    .unwrap();
    let mut second = edg::config::ExperimentConfig::load(&tmp.path().join("b/config.toml")).unwrap();
    second.output_dir = first.output_dir.clone();
    assert_eq!(first, second);
    assert_eq!(
        std::fs::read(tmp.path().join("a/loss.csv")).unwrap(),
        std::fs::read(rerun.loss_csv).unwrap()
    );
}

#[test]
fn sample_zero_rows_is_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "g.toml", &tiny_config(GAUSSIAN, tmp.path(), 2));
    let t = cmd_train(&TrainOptions {
        config: cfg,
        ..Default::default()
    })
    .unwrap();
    let s = cmd_sample(&SampleOptions {
        checkpoint: t.checkpoint,
        n: 0,
        ..Default::default()
    })
    .unwrap();
    let text = std::fs::read_to_string(&s.samples_csv).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("x_0,x_1,energy,log_weight"));
}

#[test]
fn weighted_samples_and_logz() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "g.toml", &tiny_config(GAUSSIAN, tmp.path(), 2));
    let t = cmd_train(&TrainOptions {
        config: cfg,
        ..Default::default()
    })
    .unwrap();
    let s = cmd_sample(&SampleOptions {
        checkpoint: t.checkpoint.clone(),
        n: 20,
        with_weights: true,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(s.rows, 20);
    assert_eq!(read_sample_matrix(&s.samples_csv).unwrap().shape(), (20, 2));
    assert!(s.histogram_csv.is_some());
    let one = cmd_logz(&LogZOptions {
        checkpoint: t.checkpoint.clone(),
        n: 1,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(one.stderr, None);
    let json = std::fs::read_to_string(tmp.path().join("logz.json")).unwrap();
    assert!(json.contains("\"stderr\": null"));
    let many = cmd_logz(&LogZOptions {
        checkpoint: t.checkpoint,
        n: 10,
        ..Default::default()
    })
    .unwrap();
    assert!(many.stderr.unwrap() > 0.0);
    assert!(many.mean_log_weight <= many.log_mean_weight);
}

#[test]
fn reference_is_cached_by_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "m.toml", &tiny_config(MOG6, tmp.path(), 1));
    let opts = ReferenceOptions {
        config: cfg,
        n: Some(300),
        ..Default::default()
    };
    let a = cmd_reference(&opts).unwrap();
    assert_eq!((a.method.as_str(), a.rows, a.cache_hit), ("exact", 300, false));
    let b = cmd_reference(&opts).unwrap();
    assert!(b.cache_hit);
    assert_eq!(a.path, b.path);
    let c = cmd_reference(&ReferenceOptions {
        seed: Some(9),
        ..opts
    })
    .unwrap();
    assert!(!c.cache_hit);
    assert_ne!(a.path, c.path);
}

#[test]
fn eval_same_file_uses_disjoint_halves() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "m.toml", &tiny_config(MOG6, tmp.path(), 1));
    let r = cmd_reference(&ReferenceOptions {
        config: cfg,
        n: Some(2000),
        ..Default::default()
    })
    .unwrap();
    let out = cmd_eval(&EvalOptions {
        samples: r.path.clone(),
        reference: r.path,
        m: 1000,
        repeats: 3,
        seed: 0,
        out: None,
    })
    .unwrap();
    assert!(out.disjoint_split);
    assert!(out.mmd.mean_over_repeats.abs() < 0.01);
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tiny_config(GAUSSIAN, tmp.path(), 1).replace("kind = \"ghd\"", "kind = \"flow\"");
    let cfg = write_config(tmp.path(), "bad.toml", &bad);
    let o = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("model.decoder"), "{err}");

    let missing = tmp.path().join("nope.csv");
    let o = bin()
        .args(["eval", "--samples"])
        .arg(&missing)
        .arg("--reference")
        .arg(&missing)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.csv"));

    let o = bin().arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(1));

    let good = write_config(tmp.path(), "g.toml", &tiny_config(GAUSSIAN, &tmp.path().join("run"), 3));
    let o = bin().args(["train", "--config"]).arg(&good).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_rejects_dimension_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    std::fs::write(&a, "x_0,x_1\n0,0\n1,1\n").unwrap();
    std::fs::write(&b, "x_0\n0\n1\n").unwrap();
    let e = cmd_eval(&EvalOptions {
        samples: a,
        reference: b,
        m: 2,
        repeats: 1,
        seed: 0,
        out: None,
    })
    .unwrap_err();
    assert_eq!(e.exit_code(), 1);
    assert!(e.to_string().contains("dimension"));
}
