use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use keci::corpus::toy::ToySpec;
use tempfile::TempDir;

fn keci(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_keci"))
        .args(args)
        .env("KECI_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = keci(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a small toy corpus and a fast training config.
fn setup() -> (TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        serde_json::to_string(&ToySpec::simple(12, 4, 0.5)).unwrap(),
    )
    .unwrap();
    let data = dir.path().join("toy");
    ok(&[
        "gen-toy",
        "--spec",
        s(&spec),
        "--seed",
        "3",
        "--out",
        s(&data),
    ]);
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{"d": 8, "d_tok": 8, "d_len": 2, "max_span_len": 3, "epochs": 2,
            "batch_size": 4, "lr_lower": 0.003, "lr_upper": 0.003, "position_encoding": true}"#,
    )
    .unwrap();
    (dir, data, config)
}

#[test]
fn gen_toy_is_deterministic() {
    let (dir, data, _) = setup();
    let spec = dir.path().join("spec.json");
    let again = dir.path().join("again");
    ok(&[
        "gen-toy",
        "--spec",
        s(&spec),
        "--seed",
        "3",
        "--out",
        s(&again),
    ]);
    for f in ["train.jsonl", "dev.jsonl", "kb.json", "schema.json"] {
        assert_eq!(
            fs::read(data.join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn train_eval_predict_round_trip() {
    let (dir, data, config) = setup();
    let train = data.join("train.jsonl");
    let dev = data.join("dev.jsonl");
    let kb = data.join("kb.json");
    let schema = data.join("schema.json");
    let inputs: Vec<Vec<u8>> = [&train, &dev, &kb, &schema]
        .iter()
        .map(|p| fs::read(p).unwrap())
        .collect();
    let model = dir.path().join("model.ckpt");
    let log = ok(&[
        "train",
        "--config",
        s(&config),
        "--train",
        s(&train),
        "--dev",
        s(&dev),
        "--kb",
        s(&kb),
        "--schema",
        s(&schema),
        "--out",
        s(&model),
        "--seed",
        "1",
    ]);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch=")).count(), 2);
    assert!(log.contains("dev_entity_f1="), "{log}");
    assert!(log.contains("best_epoch="), "{log}");

    // same seed, same loss curve
    let model2 = dir.path().join("model2.ckpt");
    let log2 = ok(&[
        "train",
        "--config",
        s(&config),
        "--train",
        s(&train),
        "--dev",
        s(&dev),
        "--kb",
        s(&kb),
        "--schema",
        s(&schema),
        "--out",
        s(&model2),
        "--seed",
        "1",
    ]);
    let losses = |l: &str| -> Vec<String> {
        l.lines()
            .filter(|x| x.starts_with("epoch="))
            .map(String::from)
            .collect()
    };
    assert_eq!(losses(&log), losses(&log2));
    assert_eq!(fs::read(&model).unwrap(), fs::read(&model2).unwrap());

    let metrics = dir.path().join("metrics.json");
    let out = ok(&[
        "eval",
        "--model",
        s(&model),
        "--test",
        s(&dev),
        "--kb",
        s(&kb),
        "--out",
        s(&metrics),
    ]);
    assert!(out.contains("entity"), "{out}");
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    let f1 = json["entity"]["micro"]["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));

    let preds = dir.path().join("pred.jsonl");
    ok(&[
        "predict",
        "--model",
        s(&model),
        "--test",
        s(&dev),
        "--kb",
        s(&kb),
        "--attn",
        "--out",
        s(&preds),
    ]);
    let text = fs::read_to_string(&preds).unwrap();
    let dev_lines = fs::read_to_string(&dev).unwrap().lines().count();
    assert_eq!(text.lines().count(), dev_lines);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["entities"].is_array() && v["relations"].is_array());
        for span in v["attention"].as_array().unwrap() {
            let total = span["sentinel"].as_f64().unwrap()
                + span["candidates"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|c| c["weight"].as_f64().unwrap())
                    .sum::<f64>();
            assert!((total - 1.0).abs() < 1e-4, "{total}");
        }
    }

    let report = ok(&[
        "analyze-attention",
        "--model",
        s(&model),
        "--test",
        s(&dev),
        "--kb",
        s(&kb),
    ]);
    assert!(report.contains("<sentinel>"), "{report}");

    let after: Vec<Vec<u8>> = [&train, &dev, &kb, &schema]
        .iter()
        .map(|p| fs::read(p).unwrap())
        .collect();
    assert_eq!(inputs, after, "inputs were modified");
}

#[test]
fn ablation_table_lists_each_variant() {
    let (dir, data, config) = setup();
    let out_json = dir.path().join("ablation.json");
    let out = ok(&[
        "eval",
        "--config",
        s(&config),
        "--train",
        s(&data.join("train.jsonl")),
        "--dev",
        s(&data.join("dev.jsonl")),
        "--kb",
        s(&data.join("kb.json")),
        "--ablation",
        "full,sent_context_only",
        "--out",
        s(&out_json),
    ]);
    assert!(out.contains("sent_context_only"), "{out}");
    let rows: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&out_json).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
}

#[test]
fn sentence_only_training_needs_no_kb() {
    let (dir, data, config) = setup();
    let model = dir.path().join("m.ckpt");
    ok(&[
        "train",
        "--config",
        s(&config),
        "--train",
        s(&data.join("train.jsonl")),
        "--ablation",
        "sent_context_only",
        "--out",
        s(&model),
    ]);
    ok(&[
        "eval",
        "--model",
        s(&model),
        "--test",
        s(&data.join("dev.jsonl")),
    ]);
    // the full model cannot train without one
    let out = keci(&[
        "train",
        "--config",
        s(&config),
        "--train",
        s(&data.join("train.jsonl")),
        "--out",
        s(&model),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("max_relative_error="), "{out}");
}

#[test]
fn kfold_writes_disjoint_folds() {
    let (dir, data, _) = setup();
    let folds = dir.path().join("folds");
    ok(&[
        "kfold",
        "--train",
        s(&data.join("train.jsonl")),
        "--folds",
        "3",
        "--out",
        s(&folds),
    ]);
    let total = fs::read_to_string(data.join("train.jsonl"))
        .unwrap()
        .lines()
        .count();
    let mut tested = 0;
    for i in 0..3 {
        let read = |f: &str| fs::read_to_string(folds.join(format!("fold{i}")).join(f)).unwrap();
        let (train, test) = (read("train.jsonl"), read("test.jsonl"));
        assert_eq!(train.lines().count() + test.lines().count(), total);
        assert!(test.lines().all(|l| !train.lines().any(|t| t == l)));
        tested += test.lines().count();
    }
    assert_eq!(tested, total);
}

#[test]
fn user_errors_exit_with_one() {
    assert_eq!(keci(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(keci(&["frobnicate"]).status.code(), Some(1));
    let out = keci(&[
        "eval",
        "--model",
        "/no/such/model.ckpt",
        "--test",
        "/no/such.jsonl",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(keci(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_dataset_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"id\":\"a\",\"text\":\"x y\"}\n{oops\n").unwrap();
    let out = keci(&[
        "kfold",
        "--train",
        s(&bad),
        "--folds",
        "2",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('2'), "{err}");
}
