use std::path::Path;
use std::process::{Command, Output};

use awmf_cli::config::{RawConfig, SCHEMA};
use awmf_core::pyramid::{read_manifest, SplitTag};
use awmf_core::trainer::{TrainLog, TRAIN_LOG_HEADER};

const SMALL: &str = "\
synth.slides = 3
synth.test_slides = 1
synth.width = 64
synth.height = 64
model.window = 16
model.expert_widths = 4,8
model.weighting_widths = 4,8
model.aggregator_width = 4
train.pretrain_epochs = 1
train.max_epochs = 1
train.lr = 1e-3
";

fn awmf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_awmf"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    dir
}

#[test]
fn gen_data_writes_manifest_and_is_deterministic() {
    let dir = workspace();
    let p = dir.path();
    let stdout = ok(awmf(p, &["--config", "small.cfg", "--out", "a", "gen-data"]));
    assert!(stdout.contains("largest per-slide deviation"));
    ok(awmf(p, &["--config", "small.cfg", "--out", "b", "gen-data"]));
    let entries = read_manifest(p.join("a/data/manifest.txt")).unwrap();
    assert_eq!(entries.len(), 3);
    assert_eq!(entries.iter().filter(|e| e.split == SplitTag::Test).count(), 1);
    for name in ["manifest.txt", "slide_000.pgm", "slide_002_labels.pgm"] {
        let a = std::fs::read(p.join("a/data").join(name)).unwrap();
        let b = std::fs::read(p.join("b/data").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    ok(awmf(
        p,
        &["--config", "small.cfg", "--out", "c", "--seed", "7", "gen-data"],
    ));
    let a = std::fs::read(p.join("a/data/slide_000.pgm")).unwrap();
    let c = std::fs::read(p.join("c/data/slide_000.pgm")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn missing_manifest_exits_with_data_code() {
    let dir = workspace();
    let out = awmf(
        dir.path(),
        &["--config", "small.cfg", "--set", "data.manifest=absent.txt", "pretrain"],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_key_exits_with_config_code() {
    let dir = workspace();
    let out = awmf(dir.path(), &["--set", "train.learning_rate=1", "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.learning_rate"));
    std::fs::write(dir.path().join("bad.cfg"), "train.lr = 1e-3\nmystery = 4\n").unwrap();
    let out = awmf(dir.path(), &["--config", "bad.cfg", "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn help_lists_every_key_with_its_default() {
    let dir = workspace();
    let help = ok(awmf(dir.path(), &["--help"]));
    for (k, d, _) in SCHEMA {
        assert!(help.contains(k), "help lacks {k}");
        if !d.is_empty() {
            assert!(help.contains(&format!("{k} = {d}")), "help lacks default of {k}");
        }
    }
}

#[test]
fn config_precedence_and_comments() {
    let raw = RawConfig::parse("# header\ntrain.lr = 0.5 # trailing\n\nrun.seed=3\n").unwrap();
    assert_eq!(raw.get("train.lr"), "0.5");
    assert_eq!(raw.get("run.seed"), "3");
    assert_eq!(raw.get("train.batch"), "8");
    let cfg = raw.resolve().unwrap();
    assert_eq!(cfg.train.lr, 0.5);
    assert_eq!(cfg.stride, cfg.model.window);
    assert!(RawConfig::parse("train.lr 3").is_err());
    let mut raw = RawConfig::default();
    raw.set("train.crop_mode", "cubic").unwrap();
    assert!(raw.resolve().is_err());
}

fn field(row: &str, header: &str, name: &str) -> f64 {
    let i = header.split(',').position(|h| h == name).unwrap();
    row.split(',').nth(i).unwrap().parse().unwrap()
}

#[test]
fn train_eval_agreement_segment_pipeline() {
    let dir = workspace();
    let p = dir.path();
    ok(awmf(p, &["--config", "small.cfg", "gen-data"]));
    ok(awmf(p, &["--config", "small.cfg", "train", "--max-epochs", "1"]));
    for f in [
        "pretrained.awmf",
        "pretrain_log.csv",
        "epoch_1.awmf",
        "best.awmf",
        "train_log.csv",
    ] {
        assert!(p.join("out").join(f).exists(), "{f} missing");
    }
    let log_text = std::fs::read_to_string(p.join("out/train_log.csv")).unwrap();
    let mut lines = log_text.lines();
    assert_eq!(lines.next(), Some(TRAIN_LOG_HEADER));
    let log = TrainLog::from_csv(&log_text).unwrap();
    assert_eq!(log.records.len(), 1);

    // evaluating the saved checkpoint on X' reproduces the logged mIoU
    ok(awmf(
        p,
        &[
            "--config",
            "small.cfg",
            "eval",
            "--checkpoint",
            "out/epoch_1.awmf",
            "--split",
            "val",
        ],
    ));
    let metrics = std::fs::read_to_string(p.join("out/eval/metrics_val.csv")).unwrap();
    let header = metrics.lines().next().unwrap();
    let adaptive = metrics.lines().find(|l| l.starts_with("adaptive,all,")).unwrap();
    let miou = field(adaptive, header, "iou");
    assert!(
        (miou - log.records[0].val_miou).abs() <= 1e-9,
        "{miou} vs {}",
        log.records[0].val_miou
    );

    // a pre-trained checkpoint only supports the expert variants
    ok(awmf(
        p,
        &["--config", "small.cfg", "eval", "--checkpoint", "out/pretrained.awmf"],
    ));
    let metrics = std::fs::read_to_string(p.join("out/eval/metrics_test.csv")).unwrap();
    assert!(metrics.contains("expert3,all,"));
    assert!(!metrics.contains("adaptive,"));

    ok(awmf(
        p,
        &[
            "--config",
            "small.cfg",
            "agreement",
            "--checkpoint",
            "out/best.awmf",
            "--before",
            "out/pretrained.awmf",
        ],
    ));
    let table = std::fs::read_to_string(p.join("out/agreement/agreement_test.csv")).unwrap();
    let header = table.lines().next().unwrap();
    let mut stages = 0;
    for row in table.lines().skip(1).filter(|l| l.contains(",overall,")) {
        stages += 1;
        let subsets = ["none", "e1", "e2", "e1_e2", "e3", "e1_e3", "e2_e3", "e1_e2_e3"];
        let sum: f64 = subsets.iter().map(|s| field(row, header, s)).sum();
        assert!((sum - 1.0).abs() < 1e-12, "rates sum to {sum}");
    }
    assert_eq!(stages, 2);

    ok(awmf(
        p,
        &[
            "--config",
            "small.cfg",
            "segment",
            "--checkpoint",
            "out/best.awmf",
            "--slide",
            "out/data/slide_002.pgm",
        ],
    ));
    assert!(p.join("out/segment/slide_002_labels.pgm").exists());
    assert!(p.join("out/segment/slide_002_mask.ppm").exists());
    let out = awmf(
        p,
        &[
            "--config",
            "small.cfg",
            "segment",
            "--checkpoint",
            "out/pretrained.awmf",
            "--slide",
            "out/data/slide_002.pgm",
            "--variant",
            "adaptive",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = workspace();
    let p = dir.path();
    let cfg = ["--config", "small.cfg", "--set", "train.max_epochs=2"];
    ok(awmf(p, &[&cfg[..], &["gen-data"]].concat()));
    ok(awmf(
        p,
        &[
            &cfg[..],
            &["--out", "r1", "--set", "data.manifest=out/data/manifest.txt", "train"],
        ]
        .concat(),
    ));
    ok(awmf(
        p,
        &[
            &cfg[..],
            &["--out", "r2", "--set", "data.manifest=out/data/manifest.txt", "train"],
        ]
        .concat(),
    ));
    for f in ["pretrained.awmf", "epoch_1.awmf", "epoch_2.awmf"] {
        assert_eq!(
            std::fs::read(p.join("r1").join(f)).unwrap(),
            std::fs::read(p.join("r2").join(f)).unwrap()
        );
    }
    ok(awmf(
        p,
        &[
            &cfg[..],
            &[
                "--out",
                "r2",
                "--set",
                "data.manifest=out/data/manifest.txt",
                "train",
                "--resume",
                "1",
            ],
        ]
        .concat(),
    ));
    assert_eq!(
        std::fs::read(p.join("r1/epoch_2.awmf")).unwrap(),
        std::fs::read(p.join("r2/epoch_2.awmf")).unwrap()
    );
}

#[test]
fn negative_learning_rate_is_a_config_error() {
    let dir = workspace();
    ok(awmf(dir.path(), &["--config", "small.cfg", "gen-data"]));
    let out = awmf(
        dir.path(),
        &["--config", "small.cfg", "--set", "train.lr=-1", "pretrain"],
    );
    assert_eq!(out.status.code(), Some(2));
}
