use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ccps_core::feature_file::{read_feature_file, write_feature_file};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn ccps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccps"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ccps(args);
    assert!(out.status.success(), "ccps {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn digest(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

fn gen_and_extract(dir: &Path, name: &str, format: &str, n: &str, first: &str) -> PathBuf {
    let dump = dir.join(name);
    let features = dir.join(format!("{name}.ccpf"));
    ok(&["gen", "--out", s(&dump), "--seed", "3", "--n-records", n, "--first-record", first, "--format", format]);
    ok(&["extract", "--dump", s(&dump), "--out", s(&features)]);
    features
}

const QUICK: [&str; 4] = ["--pretrain-steps", "40", "--finetune-steps", "40"];

#[test]
fn gen_writes_the_three_dump_files() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("dump");
    ok(&["gen", "--out", s(&out), "--n-records", "20"]);
    for f in ["manifest.json", "lm_head.bin", "records.bin"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn gen_with_the_same_config_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("gen.json");
    fs::write(&config, r#"{"seed": 11, "n_records": 50, "format": "OE", "max_len": 6}"#).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["gen", "--config", s(&config), "--out", s(&a)]);
    ok(&["gen", "--config", s(&config), "--out", s(&b)]);
    for f in ["manifest.json", "lm_head.bin", "records.bin"] {
        assert_eq!(digest(&a.join(f)), digest(&b.join(f)), "{f}");
    }
}

#[test]
fn invalid_config_value_exits_2_naming_the_key() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("gen.json");
    fs::write(&config, r#"{"format": "YES_NO"}"#).unwrap();
    let out = ccps(&["gen", "--config", s(&config), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format"));

    let out = ccps(&["gen", "--format", "YES_NO", "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format"));
}

#[test]
fn missing_files_exit_3() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope.json");
    let out = ccps(&["gen", "--config", s(&missing), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(3));
    let out = ccps(&["extract", "--dump", s(&tmp.path().join("nodump")), "--out", s(&tmp.path().join("f"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn extract_emits_one_matrix_per_record_and_defaults_match_explicit_flags() {
    let tmp = TempDir::new().unwrap();
    let dump = tmp.path().join("dump");
    ok(&["gen", "--out", s(&dump), "--n-records", "25", "--format", "OE"]);
    let a = tmp.path().join("a.ccpf");
    let b = tmp.path().join("b.ccpf");
    let c = tmp.path().join("c.ccpf");
    let csv = tmp.path().join("a.csv");
    ok(&["extract", "--dump", s(&dump), "--out", s(&a), "--csv", s(&csv), "--threads", "1"]);
    ok(&["extract", "--dump", s(&dump), "--out", s(&b), "--eps-max", "20", "--steps", "5", "--threads", "8"]);
    ok(&["extract", "--dump", s(&dump), "--out", s(&c), "--eps-max", "10"]);
    let (_, matrices) = read_feature_file(&a).unwrap();
    assert_eq!(matrices.len(), 25);
    assert_eq!(digest(&a), digest(&b));
    assert_ne!(digest(&a), digest(&c));
    let rows = fs::read_to_string(&csv).unwrap().lines().count() - 1;
    assert_eq!(rows, matrices.iter().map(|m| m.len()).sum::<usize>());
}

#[test]
fn single_class_training_data_exits_2() {
    let tmp = TempDir::new().unwrap();
    let dump = tmp.path().join("dump");
    let features = tmp.path().join("f.ccpf");
    ok(&["gen", "--out", s(&dump), "--n-records", "30"]);
    ok(&["extract", "--dump", s(&dump), "--out", s(&features)]);
    let (format, matrices) = read_feature_file(&features).unwrap();
    let one_class: Vec<_> = matrices.into_iter().filter(|m| m.label).collect();
    let only = tmp.path().join("only.ccpf");
    write_feature_file(&only, format, &one_class).unwrap();
    let out = ccps(&["train", "--train", s(&only), "--val", s(&features), "--out", s(&tmp.path().join("m.bin"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_is_reproducible_and_pretrain_then_finetune_equals_train() {
    let tmp = TempDir::new().unwrap();
    let train = gen_and_extract(tmp.path(), "train", "MC", "120", "0");
    let val = gen_and_extract(tmp.path(), "val", "MC", "40", "120");
    let m1 = tmp.path().join("m1.bin");
    let m2 = tmp.path().join("m2.bin");
    let pre = tmp.path().join("pre.bin");
    let m3 = tmp.path().join("m3.bin");
    let base = ["train", "--train", s(&train), "--val", s(&val), "--seed", "5"];
    let summary = ok(&[&base[..], &["--out", s(&m1)], &QUICK[..]].concat());
    ok(&[&base[..], &["--out", s(&m2)], &QUICK[..]].concat());
    assert_eq!(digest(&m1), digest(&m2));

    let json: serde_json::Value = serde_json::from_str(summary.trim()).unwrap();
    for key in ["val_answers", "val_classifier_accuracy", "val_ece", "val_brier", "val_aucpr", "val_auroc"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert!(m1.with_extension("bin.pretrain_loss.csv").is_file());
    assert!(m1.with_extension("bin.finetune_loss.csv").is_file());

    ok(&["pretrain", "--train", s(&train), "--out", s(&pre), "--seed", "5", "--pretrain-steps", "40"]);
    ok(&[&base[..], &["--out", s(&m3), "--init-model", s(&pre)], &QUICK[..]].concat());
    assert_eq!(digest(&m1), digest(&m3));
}

#[test]
fn predict_writes_probabilities_and_rejects_a_format_mismatch() {
    let tmp = TempDir::new().unwrap();
    let train = gen_and_extract(tmp.path(), "train", "MC", "100", "0");
    let val = gen_and_extract(tmp.path(), "val", "MC", "30", "100");
    let oe = gen_and_extract(tmp.path(), "oe", "OE", "10", "0");
    let model = tmp.path().join("m.bin");
    ok(&[&["train", "--train", s(&train), "--val", s(&val), "--out", s(&model)][..], &QUICK[..]].concat());

    let pred = tmp.path().join("p.jsonl");
    ok(&["predict", "--model", s(&model), "--features", s(&val), "--out", s(&pred)]);
    let lines: Vec<serde_json::Value> =
        fs::read_to_string(&pred).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 30);
    for l in &lines {
        let p = l["p"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert!(l["answer_id"].is_string());
    }

    let bad = tmp.path().join("bad.jsonl");
    let out = ccps(&["predict", "--model", s(&model), "--features", s(&oe), "--out", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!bad.exists());

    // Answer ids in a feature file are positional.
    let (format, mut matrices) = read_feature_file(&val).unwrap();
    matrices.reverse();
    let reversed = tmp.path().join("rev.ccpf");
    write_feature_file(&reversed, format, &matrices).unwrap();
    let pred_rev = tmp.path().join("rev.jsonl");
    ok(&["predict", "--model", s(&model), "--features", s(&reversed), "--out", s(&pred_rev)]);
    let scores = |path: &Path| -> Vec<(f64, u64)> {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                (v["p"].as_f64().unwrap(), v["label"].as_u64().unwrap())
            })
            .collect()
    };
    let mut again = scores(&pred_rev);
    again.reverse();
    assert_eq!(scores(&pred), again);
}

#[test]
fn evaluate_reports_hand_checked_metrics() {
    let tmp = TempDir::new().unwrap();
    let pred = tmp.path().join("p.jsonl");
    fs::write(
        &pred,
        concat!(
            "{\"answer_id\":\"a\",\"p\":0.9,\"label\":1}\n",
            "{\"answer_id\":\"b\",\"p\":0.8,\"label\":0}\n",
            "{\"answer_id\":\"c\",\"p\":0.1,\"label\":0}\n",
        ),
    )
    .unwrap();
    let out_dir = tmp.path().join("report");
    let table = ok(&["evaluate", "--predictions", s(&pred), "--out-dir", s(&out_dir)]);
    assert!(table.contains("AUROC"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    let agg = &report["aggregate"];
    assert!((agg["ece"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!((agg["brier"].as_f64().unwrap() - 0.22).abs() < 1e-12);
    assert!(out_dir.join("reliability.csv").is_file());
    assert!(out_dir.join("report.txt").is_file());

    let empty = tmp.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = ccps(&["evaluate", "--predictions", s(&empty), "--out-dir", s(&tmp.path().join("r2"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_scores_the_msp_baseline_from_a_dump() {
    let tmp = TempDir::new().unwrap();
    let dump = tmp.path().join("dump");
    ok(&["gen", "--out", s(&dump), "--n-records", "60"]);
    let out_dir = tmp.path().join("msp");
    ok(&["evaluate", "--scorer", "msp", "--dump", s(&dump), "--out-dir", s(&out_dir)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["scorer"], "msp");
    let out = ccps(&["evaluate", "--scorer", "msp", "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
}
