//! Run directory layout and its lock file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        RunDir { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoint(&self, phase: &str) -> PathBuf {
        self.root.join(phase)
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn lock(&self) -> Result<Lock> {
        fs::create_dir_all(&self.root).with_context(|| format!("creating {}", self.root.display()))?;
        let path = self.root.join(".lock");
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .or_else(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    bail!(
                        "run directory {} is locked by another command (remove {} if it is stale)",
                        self.root.display(),
                        path.display()
                    )
                }
                Err(e).with_context(|| format!("creating {}", path.display()))
            })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Lock { path })
    }
}

pub struct Lock {
    path: PathBuf,
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
