//! Exclusive ownership of an output directory.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

pub const LOCK_NAME: &str = ".lock";

/// Held while a run writes into a directory; removed on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

fn alive(pid: u32) -> bool {
    if cfg!(target_os = "linux") {
        Path::new(&format!("/proc/{pid}")).exists()
    } else {
        true
    }
}

impl DirLock {
    /// Creates the lock file, taking over one left by a process that no
    /// longer exists.
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_NAME);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id()).map_err(|e| CliError::io(&path, e))?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                    let owner = fs::read_to_string(&path)
                        .ok()
                        .and_then(|s| s.trim().parse::<u32>().ok());
                    match owner {
                        Some(pid) if !alive(pid) => {
                            let _ = fs::remove_file(&path);
                        }
                        _ => {
                            return Err(CliError::Usage(format!(
                                "{} is in use by another run (lock {})",
                                dir.display(),
                                path.display()
                            )))
                        }
                    }
                }
                Err(e) => return Err(CliError::io(&path, e)),
            }
        }
        Err(CliError::Usage(format!("could not lock {}", dir.display())))
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
