//! Artifact writing: overwrite protection and the run-metadata sidecar.
//!
//! Data artifacts are byte-reproducible for a given config and seed;
//! anything time-dependent is confined to `run_meta.json`.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};

pub struct ArtifactSink {
    dir: PathBuf,
    force: bool,
    written: Vec<String>,
}

impl ArtifactSink {
    pub fn new(dir: &Path, force: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output dir {}", dir.display()))?;
        Ok(ArtifactSink {
            dir: dir.to_path_buf(),
            force,
            written: Vec::new(),
        })
    }

    /// Check up front that none of the planned artifacts would clobber an
    /// existing file, so commands fail before doing any heavy work.
    pub fn preflight(&self, names: &[&str]) -> Result<()> {
        if self.force {
            return Ok(());
        }
        for name in names {
            let path = self.dir.join(name);
            if path.exists() {
                bail!(
                    "refusing to overwrite {} (pass --force to allow)",
                    path.display()
                );
            }
        }
        Ok(())
    }

    /// Resolve a path inside the sink, refusing to clobber existing files
    /// unless `--force` was given.
    pub fn claim(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if path.exists() && !self.force {
            bail!(
                "refusing to overwrite {} (pass --force to allow)",
                path.display()
            );
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))?;
        }
        self.written.push(name.to_string());
        Ok(path)
    }

    pub fn write_text(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.claim(name)?;
        std::fs::write(&path, contents)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }

    pub fn write_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).context("serialize artifact")?;
        text.push('\n');
        self.write_text(name, &text)
    }

    /// The one time-dependent file; always overwritten.
    pub fn write_run_meta(&mut self, command: &str, seed: u64) -> Result<()> {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let meta = serde_json::json!({
            "command": command,
            "seed": seed,
            "unix_time": timestamp,
            "artifacts": self.written,
        });
        let path = self.dir.join("run_meta.json");
        let mut text = serde_json::to_string_pretty(&meta).context("serialize run meta")?;
        text.push('\n');
        std::fs::write(&path, text)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }
}
