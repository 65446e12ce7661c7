//! Content-hashed list of every artifact a command writes.

use std::path::{Path, PathBuf};

use equimodal::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub files: Vec<ArtifactEntry>,
    /// Written but not expected to reproduce (wall-clock timing).
    pub volatile: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashMismatch {
    pub path: String,
    pub previous: String,
    pub current: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Tracks the artifacts written into one output directory.
#[derive(Debug)]
pub struct ArtifactWriter {
    root: PathBuf,
    manifest: RunManifest,
}

impl ArtifactWriter {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(ArtifactWriter {
            root: root.to_path_buf(),
            manifest: RunManifest::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn write_raw(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        self.write_raw(rel, bytes)?;
        self.record(rel, bytes);
        Ok(())
    }

    pub fn write_volatile(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        self.write_raw(rel, bytes)?;
        self.manifest.volatile.push(rel.to_string());
        Ok(())
    }

    fn record(&mut self, rel: &str, bytes: &[u8]) {
        self.manifest.files.retain(|e| e.path != rel);
        self.manifest.files.push(ArtifactEntry {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }

    /// Hash files some other component already wrote under the root.
    pub fn track_existing(&mut self, rel: &str) -> Result<()> {
        let path = self.root.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.record(rel, &bytes);
        Ok(())
    }

    /// Track every regular file below `rel_dir`, in sorted order.
    pub fn track_dir(&mut self, rel_dir: &str) -> Result<()> {
        let dir = self.root.join(rel_dir);
        let mut names: Vec<String> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        for name in names {
            self.track_existing(&format!("{rel_dir}/{name}"))?;
        }
        Ok(())
    }

    /// Write the manifest, comparing against a manifest left by an earlier
    /// run in the same directory. Mismatches are logged and returned.
    pub fn finish(mut self) -> Result<Vec<HashMismatch>> {
        let path = self.root.join(MANIFEST_FILE);
        let previous: Option<RunManifest> = std::fs::read(&path).ok().and_then(|raw| serde_json::from_slice(&raw).ok());
        self.manifest.files.sort_by(|a, b| a.path.cmp(&b.path));
        self.manifest.volatile.sort();
        self.manifest.volatile.dedup();
        let mismatches = previous.map(|p| compare(&p, &self.manifest)).unwrap_or_default();
        for m in &mismatches {
            log::warn!("{} differs from the previous run ({} -> {})", m.path, m.previous, m.current);
        }
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(mismatches)
    }
}

pub fn compare(previous: &RunManifest, current: &RunManifest) -> Vec<HashMismatch> {
    current
        .files
        .iter()
        .filter_map(|c| {
            let p = previous.files.iter().find(|p| p.path == c.path)?;
            (p.sha256 != c.sha256).then(|| HashMismatch {
                path: c.path.clone(),
                previous: p.sha256.clone(),
                current: c.sha256.clone(),
            })
        })
        .collect()
}

/// Re-hash the files listed in `dir`'s manifest against their recorded hashes.
pub fn verify(dir: &Path) -> Result<Vec<HashMismatch>> {
    let path = dir.join(MANIFEST_FILE);
    let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: RunManifest = serde_json::from_slice(&raw).map_err(|e| Error::format(MANIFEST_FILE, e.to_string()))?;
    let mut out = Vec::new();
    for entry in &manifest.files {
        let p = dir.join(&entry.path);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let current = sha256_hex(&bytes);
        if current != entry.sha256 {
            out.push(HashMismatch {
                path: entry.path.clone(),
                previous: entry.sha256.clone(),
                current,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn rerun_detects_changes() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ArtifactWriter::new(dir.path()).unwrap();
        w.write("a.txt", b"one").unwrap();
        w.write_volatile("timing.json", b"1").unwrap();
        assert!(w.finish().unwrap().is_empty());
        assert!(verify(dir.path()).unwrap().is_empty());

        let mut w = ArtifactWriter::new(dir.path()).unwrap();
        w.write("a.txt", b"two").unwrap();
        w.write_volatile("timing.json", b"2").unwrap();
        let mismatches = w.finish().unwrap();
        assert_eq!(mismatches.len(), 1);
        assert_eq!(mismatches[0].path, "a.txt");
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ArtifactWriter::new(dir.path()).unwrap();
        w.write("sub/b.csv", b"x,y\n").unwrap();
        w.finish().unwrap();
        std::fs::write(dir.path().join("sub/b.csv"), b"x,z\n").unwrap();
        assert_eq!(verify(dir.path()).unwrap().len(), 1);
    }
}
