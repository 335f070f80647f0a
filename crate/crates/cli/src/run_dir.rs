//! Layout of a run directory and the lock that makes one process its
//! only writer.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub const LOCK_FILE: &str = "run.lock";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

/// Paths of every artifact a run writes.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn snapshot(&self) -> PathBuf {
        self.path(CONFIG_SNAPSHOT)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.path("data")
    }

    /// Prefix of the full train/dev/test splits and the pool.
    pub fn corpus_prefix(&self) -> String {
        prefix(&self.data_dir(), "corpus")
    }

    /// Prefix of the labeled share of the training split.
    pub fn baseline_prefix(&self) -> String {
        prefix(&self.data_dir(), "baseline")
    }

    pub fn bpe_dir(&self) -> PathBuf {
        self.path("bpe")
    }

    pub fn train_checkpoints(&self) -> PathBuf {
        self.path("checkpoints/train")
    }

    /// The model `train` produced (or `active-learn --baseline-run` copied).
    pub fn best_checkpoint(&self) -> PathBuf {
        self.train_checkpoints().join("best.ckpt")
    }

    pub fn al_checkpoints(&self) -> PathBuf {
        self.path("checkpoints/al")
    }

    pub fn train_log(&self) -> PathBuf {
        self.path("train_log.jsonl")
    }

    pub fn train_summary(&self) -> PathBuf {
        self.path("train_summary.json")
    }

    pub fn al_train_log(&self) -> PathBuf {
        self.path("al_train_log.jsonl")
    }

    pub fn journal(&self) -> PathBuf {
        self.path("journal.jsonl")
    }

    pub fn test_report(&self) -> PathBuf {
        self.path("test_report.json")
    }

    /// Creates the directory and takes the lock.
    pub fn lock(&self) -> Result<RunLock> {
        fs::create_dir_all(&self.root).with_context(|| format!("creating {}", self.root.display()))?;
        RunLock::acquire(&self.path(LOCK_FILE))
    }
}

fn prefix(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

/// Exclusive ownership of a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(path: &Path) -> Result<Self> {
        match OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).with_context(|| format!("writing {}", path.display()))?;
                Ok(Self {
                    path: path.to_path_buf(),
                })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(path).unwrap_or_default();
                bail!(
                    "run directory is in use by process {} ({} exists; delete it if that process is gone)",
                    holder.trim(),
                    path.display()
                )
            }
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
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
    fn second_lock_fails_until_the_first_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path().join("r"));
        let first = run.lock().unwrap();
        let err = run.lock().unwrap_err().to_string();
        assert!(err.contains("in use"), "{err}");
        drop(first);
        assert!(run.lock().is_ok());
    }
}
