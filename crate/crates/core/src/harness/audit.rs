//! Line-delimited JSON audit files.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::Serialize;

use crate::error::{Error, Result};

/// Appends JSON lines under a directory, or discards them when disabled.
/// Records are flushed as soon as they are produced so a failing phase
/// leaves its trail behind.
#[derive(Debug, Default)]
pub struct AuditLog {
    dir: Option<PathBuf>,
    written: Mutex<Vec<PathBuf>>,
}

impl AuditLog {
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn in_dir(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir: Some(dir),
            written: Mutex::default(),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Truncates `name` so a re-run session does not append to stale lines.
    pub fn reset(&self, name: &str) -> Result<()> {
        if let Some(dir) = &self.dir {
            let path = dir.join(name);
            fs::write(&path, "").map_err(|e| Error::io(&path, e))?;
            self.remember(path);
        }
        Ok(())
    }

    pub fn append<T: Serialize>(&self, name: &str, records: &[T]) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(name);
        let mut buf = String::new();
        for r in records {
            buf.push_str(&serde_json::to_string(r)?);
            buf.push('\n');
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        file.write_all(buf.as_bytes()).map_err(|e| Error::io(&path, e))?;
        self.remember(path);
        Ok(())
    }

    /// Every file touched so far, in first-touch order.
    pub fn files(&self) -> Vec<PathBuf> {
        self.written.lock().expect("audit registry poisoned").clone()
    }

    fn remember(&self, path: PathBuf) {
        let mut w = self.written.lock().expect("audit registry poisoned");
        if !w.contains(&path) {
            w.push(path);
        }
    }
}
