//! Advisory lock that keeps one process per output directory.

use std::fs::{self, File, TryLockError};
use std::path::{Path, PathBuf};

use crate::CliError;

pub const LOCK_FILE: &str = ".aroid.lock";

/// Held for the lifetime of a command; the OS releases it on exit.
pub struct DirLock {
    _file: File,
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("cannot create output directory {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        let file = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| CliError::Runtime(format!("cannot open lock file {}: {e}", path.display())))?;
        match file.try_lock() {
            Ok(()) => Ok(Self { _file: file, path }),
            Err(TryLockError::WouldBlock) => Err(CliError::Runtime(format!(
                "{} is in use by another aroid process (lock {})",
                dir.display(),
                path.display()
            ))),
            Err(TryLockError::Error(e)) => Err(CliError::Runtime(format!("cannot lock {}: {e}", path.display()))),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
