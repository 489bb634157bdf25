#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dermclass"))
}

/// Runs one subcommand against `config` and returns its output.
pub fn run(cmd: &str, config: &Path, extra: &[&str]) -> Output {
    bin()
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .args(extra)
        .output()
        .expect("binary runs")
}

pub fn ok(cmd: &str, config: &Path, extra: &[&str]) -> Output {
    let out = run(cmd, config, extra);
    assert!(
        out.status.success(),
        "{cmd} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The shipped toy config with its paths redirected into `dir`.
pub fn toy_config(dir: &Path) -> Value {
    let text = fs::read_to_string(repo_root().join("configs/toy.json")).unwrap();
    let mut cfg: Value = serde_json::from_str(&text).unwrap();
    cfg["paths"] = json!({
        "manifest": dir.join("data/metadata.csv"),
        "image_dir": dir.join("data/images"),
        "output_dir": dir.join("run"),
    });
    cfg
}

/// A toy config over a small balanced synthetic set with short training.
pub fn tiny_config(dir: &Path) -> Value {
    let mut cfg = toy_config(dir);
    cfg["synthetic"]["counts"] = json!([8, 8, 8, 8, 8, 8, 8]);
    cfg["cap"] = json!(100);
    cfg["train"]["epochs"] = json!(2);
    cfg["train"]["resume_epochs"] = json!(1);
    cfg
}

pub fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

/// The machine-readable error line a failing command printed.
pub fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"))
}
