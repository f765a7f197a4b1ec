//! Self-describing run directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.cfg";

/// SHA-256 over `blob <len>\0` followed by the content, as git hashes blobs.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(blob_hash(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: String,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: String,
    pub datasets: BTreeMap<String, DatasetRef>,
    /// Hash of every other file in the run directory, keyed by file name.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    /// Hashes the datasets and every file currently in `dir`.
    pub fn collect(dir: &Path, run_id: &str, config: &str, datasets: &[(&str, &Path)]) -> Result<Self> {
        let mut artifacts = BTreeMap::new();
        for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name == MANIFEST_FILE || !entry.file_type()?.is_file() {
                continue;
            }
            artifacts.insert(name, file_hash(&entry.path())?);
        }
        let datasets = datasets
            .iter()
            .map(|(role, path)| {
                Ok((
                    role.to_string(),
                    DatasetRef {
                        path: path.display().to_string(),
                        hash: file_hash(path)?,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            run_id: run_id.to_string(),
            config: config.to_string(),
            datasets,
            artifacts,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }

    /// Reads `dir/manifest.json` and checks every artifact against its hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        m.verify(dir)?;
        Ok(m)
    }

    pub fn verify(&self, dir: &Path) -> Result<()> {
        for (name, want) in &self.artifacts {
            let got = file_hash(&dir.join(name))?;
            if &got != want {
                bail!("{name}: hash {got} does not match manifest {want}");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_convention() {
        // printf 'hello\n' | git hash-object --object-format=sha256 --stdin
        assert_eq!(
            blob_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn tampered_artifact_fails_verification() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "one").unwrap();
        let m = RunManifest::collect(dir.path(), "r", "epochs = 1\n", &[]).unwrap();
        m.write(dir.path()).unwrap();
        assert_eq!(RunManifest::load(dir.path()).unwrap(), m);
        assert!(!m.artifacts.contains_key(MANIFEST_FILE));
        fs::write(dir.path().join("a.txt"), "two").unwrap();
        assert!(RunManifest::load(dir.path()).is_err());
    }
}
