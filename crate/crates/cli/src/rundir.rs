//! Run-directory discipline: directories are append-only with a single
//! writer. A lock file guards against concurrent writers; rerunning into a
//! non-empty directory requires --force.

use crate::errors::CliError;
use std::path::{Path, PathBuf};

const LOCK_NAME: &str = ".hafrm.lock";

pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Create (or reuse with --force) a run directory and take its lock.
pub fn prepare(dir: impl AsRef<Path>, force: bool) -> Result<RunLock, CliError> {
    let dir = dir.as_ref();
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::config(format!(
                "run directory {} is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    } else {
        std::fs::create_dir_all(dir)?;
    }
    let lock_path = dir.join(LOCK_NAME);
    if force {
        let _ = std::fs::remove_file(&lock_path);
    }
    match std::fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&lock_path)
    {
        Ok(_) => Ok(RunLock { path: lock_path }),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::config(format!(
            "run directory {} is locked by another writer (remove {LOCK_NAME} or pass --force)",
            dir.display()
        ))),
        Err(e) => Err(e.into()),
    }
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, contents)?;
    Ok(path)
}
