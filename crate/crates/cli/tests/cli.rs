mod common;

use std::fs;

use common::*;
use serde_json::json;

fn prepared(cfg: &serde_json::Value) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cfg.clone();
    let paths = tiny_config(dir.path())["paths"].clone();
    cfg["paths"] = paths;
    let path = write_config(dir.path(), &cfg);
    ok("gen-synthetic", &path, &[]);
    ok("prepare", &path, &[]);
    (dir, path)
}

#[test]
fn prepare_is_idempotent_and_caps() {
    let probe = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(probe.path());
    cfg["synthetic"]["counts"] = json!([20, 5, 30, 4, 12, 40, 6]);
    cfg["cap"] = json!(10);
    let (dir, path) = prepared(&cfg);
    let run = dir.path().join("run");
    let first: Vec<Vec<u8>> = ["train.csv", "validation.csv", "train_capped.csv", "class_weights.json", "cache.bin"]
        .iter()
        .map(|f| fs::read(run.join("prepare").join(f)).unwrap())
        .collect();
    ok("prepare", &path, &[]);
    for (f, bytes) in ["train.csv", "validation.csv", "train_capped.csv", "class_weights.json", "cache.bin"]
        .iter()
        .zip(&first)
    {
        assert_eq!(&fs::read(run.join("prepare").join(f)).unwrap(), bytes, "{f}");
    }
    let report = read_json(&run.join("prepare/report.json"));
    for class in ["akiec", "bcc", "bkl", "df", "mel", "nv", "vasc"] {
        let train = report["counts"]["train"][class].as_u64().unwrap();
        assert_eq!(report["counts"]["train_capped"][class].as_u64().unwrap(), train.min(10), "{class}");
    }
    assert_eq!(report["records"], 117);
    let weights = read_json(&run.join("prepare/class_weights.json"));
    assert_eq!(weights["source"], "capped");
    assert_eq!(read_json(&run.join("config.json"))["cap"], 10);
}

#[test]
fn early_stop_is_recorded() {
    let probe = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(probe.path());
    cfg["optimizer"]["learning_rate"] = json!(0.0);
    cfg["train"]["fine_tune_last_n"] = json!(3);
    cfg["train"]["epochs"] = json!(6);
    cfg["train"]["patience"] = json!(2);
    let (dir, path) = prepared(&cfg);
    ok("train", &path, &[]);
    let run = dir.path().join("run");
    let history = fs::read_to_string(run.join("train/history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,train_accuracy,val_loss,val_accuracy\n"));
    assert_eq!(history.lines().count(), 1 + 3);
    let status = read_json(&run.join("status.json"));
    assert_eq!(status["train"]["state"], "complete");
    assert_eq!(status["train"]["early_stop_epoch"], 3);
    let summary = read_json(&run.join("train/summary.json"));
    assert_eq!(summary["best_epoch"], 1);
    for f in ["best.ckpt", "confusion.csv", "confusion_normalized.csv", "per_class_tpr.json"] {
        assert!(run.join("train").join(f).is_file(), "{f}");
    }
}

#[test]
fn resume_and_evaluate() {
    let probe = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(probe.path());
    cfg["train"]["resume_epochs"] = json!(0);
    let (dir, path) = prepared(&cfg);
    let run = dir.path().join("run");
    ok("train", &path, &[]);

    ok("resume", &path, &[]);
    assert_eq!(
        fs::read(run.join("train/best.ckpt")).unwrap(),
        fs::read(run.join("resume/final.ckpt")).unwrap()
    );
    let summary = read_json(&run.join("resume/summary.json"));
    let train_summary = read_json(&run.join("train/summary.json"));
    assert_eq!(summary["phase2"]["epochs_run"], 0);
    assert_eq!(summary["validation"]["accuracy"], train_summary["validation"]["accuracy"]);
    let history = fs::read_to_string(run.join("resume/history.csv")).unwrap();
    assert!(history.starts_with("phase,epoch,"));
    assert_eq!(history.lines().count(), 1 + 2);

    // One-sample listing gives a single nonzero row.
    let one = dir.path().join("one.csv");
    let val = fs::read_to_string(run.join("prepare/validation.csv")).unwrap();
    let row = val.lines().nth(1).unwrap();
    fs::write(&one, format!("image_id,label_code\n{row}\n")).unwrap();
    ok("evaluate", &path, &["--listing", one.to_str().unwrap()]);
    let cm = fs::read_to_string(run.join("evaluate/confusion.csv")).unwrap();
    let total: u64 = cm
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(1).map(|v| v.parse::<u64>().unwrap()).collect::<Vec<_>>())
        .sum();
    assert_eq!(total, 1);
    assert_eq!(cm.lines().count(), 8);

    // Evaluating on the training listing beats or matches validation here.
    ok(
        "evaluate",
        &path,
        &["--listing", run.join("prepare/train_capped.csv").to_str().unwrap()],
    );
    assert!(read_json(&run.join("evaluate/metrics.json"))["metrics"]["accuracy"].is_number());
}

#[test]
fn mismatched_classes_fail_cleanly() {
    let probe = tempfile::tempdir().unwrap();
    let cfg = tiny_config(probe.path());
    let (dir, path) = prepared(&cfg);
    ok("train", &path, &[]);
    let mut bad = read_json(&path);
    bad["network"]["num_classes"] = json!(5);
    let bad_path = dir.path().join("bad.json");
    fs::write(&bad_path, bad.to_string()).unwrap();
    let out = run("evaluate", &bad_path, &[]);
    assert!(!out.status.success());
    assert_eq!(error_json(&out)["error"], "shape_mismatch");
    let status = read_json(&dir.path().join("run/status.json"));
    assert_eq!(status["evaluate"]["state"], "failed");
}

#[test]
fn malformed_manifest_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let path = write_config(dir.path(), &cfg);
    fs::create_dir_all(dir.path().join("data")).unwrap();
    fs::write(
        dir.path().join("data/metadata.csv"),
        "lesion_id,image_id,dx,dx_type,age,sex,localization\nHAM_1,ISIC_1,nv,histo,40,male,back\nHAM_2,ISIC_2,xyz,histo,40,male,back\n",
    )
    .unwrap();
    let out = run("prepare", &path, &[]);
    assert!(!out.status.success());
    let err = error_json(&out);
    assert_eq!(err["error"], "dataset");
    assert!(err["message"].as_str().unwrap().contains("line 3"), "{err}");
}

#[test]
fn locked_output_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &tiny_config(dir.path()));
    fs::create_dir_all(dir.path().join("run")).unwrap();
    fs::write(dir.path().join("run/.lock"), "1").unwrap();
    let out = run("gen-synthetic", &path, &[]);
    assert!(!out.status.success());
    assert_eq!(error_json(&out)["error"], "locked");
}

#[test]
fn augment_preview_logs_parameters() {
    let probe = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(probe.path());
    cfg["synthetic"]["counts"] = json!([1, 1, 1, 1, 1, 1, 1]);
    let dir = tempfile::tempdir().unwrap();
    cfg["paths"] = tiny_config(dir.path())["paths"].clone();
    let path = write_config(dir.path(), &cfg);
    ok("gen-synthetic", &path, &[]);
    let preview = dir.path().join("run/augment_preview");

    ok("augment-preview", &path, &["--image-id", "ISIC_0000002", "-n", "12"]);
    let log = fs::read_to_string(preview.join("transforms.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "index,rotation_deg,shear_deg,tx,ty,hflip,vflip");
    assert_eq!(log.lines().count(), 13);
    for line in log.lines().skip(1) {
        let rot: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(rot.abs() <= 20.0, "{line}");
    }
    ok("augment-preview", &path, &["--image-id", "ISIC_0000002", "-n", "12"]);
    assert_eq!(fs::read_to_string(preview.join("transforms.csv")).unwrap(), log);

    let mut still = cfg.clone();
    still["augment"] = json!({
        "max_rotation_deg": 0.0, "max_shear_deg": 0.0, "max_translate_frac": 0.0,
        "hflip_prob": 0.0, "vflip_prob": 0.0, "seed": 2
    });
    let still_path = dir.path().join("still.json");
    fs::write(&still_path, still.to_string()).unwrap();
    ok("augment-preview", &still_path, &["--image-id", "ISIC_0000002", "-n", "3"]);
    let a = fs::read(preview.join("ISIC_0000002_000.png")).unwrap();
    for i in 1..3 {
        assert_eq!(fs::read(preview.join(format!("ISIC_0000002_{i:03}.png"))).unwrap(), a);
    }
}
