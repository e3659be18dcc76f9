use std::fs::{File, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::CliError;

pub const LOCK_FILE: &str = ".bitstorm.lock";
pub const LOG_FILE: &str = "run.log";

/// Console output mirrored into `run.log` once an output directory is known.
#[derive(Default)]
pub struct Console {
    log: Option<File>,
}

impl Console {
    pub fn attach_log(&mut self, dir: &Path) -> Result<()> {
        let path = dir.join(LOG_FILE);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        self.log = Some(file);
        Ok(())
    }

    fn mirror(&mut self, text: &str) {
        if let Some(log) = &mut self.log {
            // Losing the log must not fail the run.
            let _ = writeln!(log, "{text}");
        }
    }

    pub fn line(&mut self, text: impl AsRef<str>) {
        let text = text.as_ref();
        println!("{text}");
        self.mirror(text);
    }

    pub fn error(&mut self, text: impl AsRef<str>) {
        let text = text.as_ref();
        eprintln!("{text}");
        self.mirror(text);
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(OutDirLock { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::Locked(path).into()),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
