use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Fixed directory layout of one run:
///
/// ```text
/// <run>/run.lock          held while a process owns the run
/// <run>/config.json       resolved configuration
/// <run>/data/             images: images/, patches/, translated/, generated/
/// <run>/manifests/        JSONL manifests, record paths relative to ../data
/// <run>/checkpoints/      translator and classifier weights
/// <run>/scores/           per-model score CSVs
/// <run>/reports/          report tables and training curves
/// <run>/figures/          rendered figures
/// ```
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

/// Manifest root, relative to `manifests/`.
pub const DATA_ROOT: &str = "../data";

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }

    pub fn manifest(&self, name: &str) -> PathBuf {
        self.manifests().join(format!("{name}.jsonl"))
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoints().join(format!("{name}.json"))
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("scores")
    }

    pub fn score_file(&self, name: &str) -> PathBuf {
        self.scores().join(format!("{name}.csv"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.data(), self.manifests(), self.checkpoints(), self.scores(), self.reports(), self.figures()] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }

    pub fn lock(&self) -> Result<RunLock> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        RunLock::acquire(&self.root.join("run.lock"))
    }
}

/// Exclusive ownership of a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(path: &Path) -> Result<Self> {
        match OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(_) => Ok(Self { path: path.to_path_buf() }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Usage(format!(
                "run directory is locked by another process ({}); remove the file if that process is gone",
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let layout = RunLayout::new(dir.path());
        let lock = layout.lock().unwrap();
        assert!(matches!(layout.lock(), Err(Error::Usage(_))));
        drop(lock);
        assert!(layout.lock().is_ok());
    }
}
