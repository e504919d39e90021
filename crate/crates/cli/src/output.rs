//! Output directory ownership and whole-file atomic writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use resdistill::nn::ParameterSet;

pub const LOCK_FILE: &str = "run.lock";

/// Where a command writes, after the directory has been claimed.
pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    /// Creates `root` and drops a lock marker into it. A marker left by an
    /// earlier run makes this fail unless `force` is set.
    pub fn claim(root: &Path, command: &str, force: bool) -> Result<Self> {
        let lock = root.join(LOCK_FILE);
        if lock.exists() && !force {
            bail!("output directory {} is occupied by an earlier run (found {LOCK_FILE}); pass --force to overwrite", root.display());
        }
        fs::create_dir_all(root).with_context(|| format!("cannot create {}", root.display()))?;
        let out = OutputDir { root: root.to_path_buf() };
        out.write(LOCK_FILE, format!("{command}\n").as_bytes())?;
        Ok(out)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    /// Writes `relative` under the root through a temporary file and a rename.
    pub fn write(&self, relative: &str, bytes: &[u8]) -> Result<PathBuf> {
        let target = self.path(relative);
        write_atomic(&target, |tmp| {
            let mut f = fs::File::create(tmp)?;
            f.write_all(bytes)?;
            f.sync_all()
        })?;
        Ok(target)
    }

    pub fn write_str(&self, relative: &str, text: &str) -> Result<PathBuf> {
        self.write(relative, text.as_bytes())
    }

    pub fn save_checkpoint(&self, relative: &str, params: &ParameterSet) -> Result<PathBuf> {
        let target = self.path(relative);
        write_atomic(&target, |tmp| params.save(tmp).map_err(std::io::Error::other))?;
        Ok(target)
    }
}

fn write_atomic(target: &Path, fill: impl FnOnce(&Path) -> std::io::Result<()>) -> Result<()> {
    let dir = target.parent().context("output path has no parent directory")?;
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let name = target.file_name().context("output path has no file name")?.to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp"));
    fill(&tmp).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, target).with_context(|| format!("cannot move {} into place", target.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_blocks_second_claim_unless_forced() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("out");
        let out = OutputDir::claim(&root, "cost", false).unwrap();
        out.write_str("a/b.csv", "x\n").unwrap();
        assert_eq!(fs::read_to_string(root.join("a/b.csv")).unwrap(), "x\n");
        assert!(!root.join("a/.b.csv.tmp").exists());
        let err = OutputDir::claim(&root, "cost", false).err().unwrap().to_string();
        assert!(err.contains("occupied"), "{err}");
        assert!(OutputDir::claim(&root, "cost", true).is_ok());
    }
}
