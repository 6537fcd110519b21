//! Reproducibility manifest written next to every run's artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;

pub const RUN_MANIFEST: &str = "run_manifest.txt";

#[derive(Debug, Default)]
pub struct RunRecord {
    settings: Vec<(String, String)>,
    artifacts: Vec<PathBuf>,
}

impl RunRecord {
    pub fn new(command: &str) -> Self {
        let mut r = RunRecord::default();
        r.set("command", command);
        r.set("tool_version", env!("CARGO_PKG_VERSION"));
        r.set("format.signal", "TMFS");
        r.set("format.image", "TMFI");
        r.set("format.feature_map", "TMFA");
        r.set("format.checkpoint", format!("TMFM v{}", tmf_core::model::CHECKPOINT_VERSION));
        r
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.settings.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.settings.push((key.to_string(), value)),
        }
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        let p = path.into();
        if !self.artifacts.contains(&p) {
            self.artifacts.push(p);
        }
    }

    /// Writes a text artifact and records it.
    pub fn write_text(&mut self, path: PathBuf, text: &str) -> anyhow::Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
        self.artifact(path);
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.settings {
            let _ = writeln!(s, "{k}={v}");
        }
        for a in &self.artifacts {
            let _ = writeln!(s, "artifact={}", a.display());
        }
        s
    }

    pub fn finish(mut self, out: &Path) -> anyhow::Result<()> {
        let path = out.join(RUN_MANIFEST);
        self.artifact(path.clone());
        let text = self.render();
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
