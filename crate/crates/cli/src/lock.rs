use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use moe_prune::Error;

const LOCK_NAME: &str = ".moe-prune.lock";

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    /// Creates `dir` if needed and takes its lock; fails if another run holds it.
    pub fn acquire(dir: &Path) -> Result<Self, Error> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join(LOCK_NAME);
        OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            let context = if e.kind() == std::io::ErrorKind::AlreadyExists {
                format!("{} is locked by another run (remove {} if it is stale)", dir.display(), path.display())
            } else {
                format!("locking {}", dir.display())
            };
            Error::io(context, e)
        })?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
