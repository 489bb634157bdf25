//! Output directory handling: the lock file, atomic writes and the run-status
//! file.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Map, Value};

pub const LOCK_FILE: &str = ".lock";
pub const STATUS_FILE: &str = "status.json";

#[derive(Debug, thiserror::Error)]
#[error("output directory {0} is locked by another command; remove {LOCK_FILE} if it is stale")]
pub struct Locked(pub PathBuf);

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// One command's hold on an output directory.
pub struct RunContext {
    pub out: PathBuf,
    command: &'static str,
    written: Vec<String>,
    notes: Map<String, Value>,
    lock: PathBuf,
}

impl RunContext {
    pub fn begin(out: &Path, command: &'static str) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
        let lock = out.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(Locked(out.to_path_buf()).into()),
            Err(e) => return Err(e).with_context(|| format!("creating {}", lock.display())),
        }
        let ctx = Self {
            out: out.to_path_buf(),
            command,
            written: Vec::new(),
            notes: Map::new(),
            lock,
        };
        ctx.write_status("running", None)?;
        Ok(ctx)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Atomically writes an artifact under the output directory and records
    /// it.
    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(rel);
        write_atomic(&path, bytes.as_ref())?;
        self.record(rel);
        Ok(path)
    }

    pub fn write_json(&mut self, rel: &str, value: &impl serde::Serialize) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write(rel, text)
    }

    /// Records an artifact produced by other means.
    pub fn record(&mut self, rel: &str) {
        if !self.written.iter().any(|w| w == rel) {
            self.written.push(rel.to_string());
        }
    }

    /// Adds a key to the status file.
    pub fn note(&mut self, key: &str, value: impl Into<Value>) {
        self.notes.insert(key.to_string(), value.into());
    }

    /// Updates this command's entry in the status file, keeping the
    /// entries of other commands.
    fn write_status(&self, state: &str, error: Option<&str>) -> Result<()> {
        let mut status = json!({
            "state": state,
            "outputs": self.written,
        });
        let obj = status.as_object_mut().expect("object literal");
        if let Some(e) = error {
            obj.insert("error".into(), e.into());
            obj.insert("partial".into(), (!self.written.is_empty()).into());
        }
        for (k, v) in &self.notes {
            obj.insert(k.clone(), v.clone());
        }
        let path = self.out.join(STATUS_FILE);
        let mut all: Map<String, Value> = fs::read(&path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default();
        all.insert(self.command.to_string(), status);
        write_atomic(&path, (serde_json::to_string_pretty(&all)? + "\n").as_bytes())
    }

    /// Writes the final status and releases the lock.
    pub fn finish<T>(self, result: &Result<T>) -> Result<()> {
        let status = match result {
            Ok(_) => self.write_status("complete", None),
            Err(e) => self.write_status("failed", Some(&format!("{e:#}"))),
        };
        fs::remove_file(&self.lock).ok();
        status
    }
}

impl Drop for RunContext {
    fn drop(&mut self) {
        fs::remove_file(&self.lock).ok();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_excludes_second_command() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunContext::begin(dir.path(), "train").unwrap();
        let err = RunContext::begin(dir.path(), "prepare").err().unwrap();
        assert!(err.downcast_ref::<Locked>().is_some());
        a.finish::<()>(&Ok(())).unwrap();
        RunContext::begin(dir.path(), "prepare").unwrap().finish::<()>(&Ok(())).unwrap();
        let status: Value = serde_json::from_slice(&fs::read(dir.path().join(STATUS_FILE)).unwrap()).unwrap();
        assert_eq!(status["train"]["state"], "complete");
        assert_eq!(status["prepare"]["state"], "complete");
    }

    #[test]
    fn failure_flags_partial_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut ctx = RunContext::begin(dir.path(), "train").unwrap();
        ctx.write("train/history.csv", "x").unwrap();
        ctx.note("early_stop_epoch", 4);
        ctx.finish::<()>(&Err(anyhow::anyhow!("boom"))).unwrap();
        let status: Value = serde_json::from_slice(&fs::read(dir.path().join(STATUS_FILE)).unwrap()).unwrap();
        let train = &status["train"];
        assert_eq!(train["state"], "failed");
        assert_eq!(train["partial"], true);
        assert_eq!(train["outputs"][0], "train/history.csv");
        assert_eq!(train["early_stop_epoch"], 4);
        assert!(!dir.path().join(LOCK_FILE).exists());
    }
}
