use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Files a command produces, held in memory until the command succeeds.
#[derive(Default)]
pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    /// Writes every file into `dir`. On failure, removes whatever this call
    /// wrote, and the directory too if it created it.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let created = !dir.exists();
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut written = Vec::new();
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            if let Err(e) = fs::write(&path, bytes) {
                let _ = fs::remove_file(&path);
                for p in &written {
                    let _ = fs::remove_file(p);
                }
                if created {
                    let _ = fs::remove_dir(dir);
                }
                return Err(e).with_context(|| format!("writing {}", path.display()));
            }
            written.push(path);
        }
        Ok(written)
    }
}
