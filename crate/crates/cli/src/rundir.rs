use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "run_manifest.json";

/// One produced file, recorded relative to the run directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub path: String,
    pub command: String,
    pub bytes: u64,
    pub digest: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub files: Vec<Entry>,
}

/// Output directory of a run plus its manifest of produced files.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("cannot create run directory {}", root.display()))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn read_manifest(&self) -> Result<RunManifest> {
        let path = self.path(MANIFEST);
        if !path.exists() {
            return Ok(RunManifest::default());
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))
    }

    /// Records `files` as produced by `command`, replacing older entries of the same path.
    pub fn record(&self, command: &str, files: &[PathBuf]) -> Result<()> {
        let mut manifest = self.read_manifest()?;
        for file in files {
            let rel = file.strip_prefix(&self.root).unwrap_or(file).to_string_lossy().replace('\\', "/");
            let bytes = fs::read(file).with_context(|| format!("cannot read {}", file.display()))?;
            manifest.files.retain(|e| e.path != rel);
            manifest.files.push(Entry {
                path: rel,
                command: command.to_string(),
                bytes: bytes.len() as u64,
                digest: dakd::dataio::fingerprint(&bytes),
            });
        }
        manifest.files.sort_by(|a, b| a.path.cmp(&b.path));
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(self.path(MANIFEST), text + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_are_replaced_and_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path()).unwrap();
        let (a, b) = (run.path("b.csv"), run.path("a.csv"));
        fs::write(&a, "one").unwrap();
        fs::write(&b, "two").unwrap();
        run.record("x", &[a.clone(), b]).unwrap();
        fs::write(&a, "three").unwrap();
        run.record("y", &[a]).unwrap();
        let m = run.read_manifest().unwrap();
        let names: Vec<_> = m.files.iter().map(|e| (e.path.as_str(), e.command.as_str(), e.bytes)).collect();
        assert_eq!(names, vec![("a.csv", "x", 3), ("b.csv", "y", 5)]);
    }
}
