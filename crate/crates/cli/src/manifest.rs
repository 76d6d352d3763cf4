//! Run manifests: the resolved configuration and content hashes of every
//! input and output of a command.

use std::fs;
use std::path::Path;

use efv_core::config::RunConfig;
use efv_core::io_util::write_atomic;
use efv_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub complete: bool,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Hash of a file, or for a directory a hash over the sorted relative paths
/// and hashes of every file beneath it.
pub fn artifact(path: &Path) -> Result<Artifact> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let (sha256, bytes) = if meta.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        let mut h = Sha256::new();
        let mut total = 0;
        for (rel, digest, n) in files {
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(digest.as_bytes());
            h.update(b"\n");
            total += n;
        }
        (hex(&h.finalize()), total)
    } else {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        (sha256_hex(&data), data.len() as u64)
    };
    Ok(Artifact {
        path: path.display().to_string(),
        sha256,
        bytes,
    })
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, String, u64)>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let data = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.push((rel, sha256_hex(&data), data.len() as u64));
        }
    }
    Ok(())
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: RunConfig, inputs: &[&Path]) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config,
            inputs: inputs.iter().map(|p| artifact(p)).collect::<Result<_>>()?,
            outputs: Vec::new(),
            complete: false,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    /// Records the outputs and rewrites the manifest as complete.
    pub fn finish(&mut self, path: &Path, outputs: &[&Path]) -> Result<()> {
        self.outputs = outputs.iter().map(|p| artifact(p)).collect::<Result<_>>()?;
        self.complete = true;
        self.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::FormatMismatch(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn directory_hash_tracks_contents() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("0")).unwrap();
        fs::write(dir.path().join("0/a.bin"), b"one").unwrap();
        fs::write(dir.path().join("b.bin"), b"two").unwrap();
        let a = artifact(dir.path()).unwrap();
        assert_eq!(a.bytes, 6);
        assert_eq!(a, artifact(dir.path()).unwrap());
        fs::write(dir.path().join("b.bin"), b"tw0").unwrap();
        assert_ne!(a.sha256, artifact(dir.path()).unwrap().sha256);
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.bin");
        fs::write(&input, b"data").unwrap();
        let path = dir.path().join("run.json");
        let mut m = RunManifest::new("train", 7, RunConfig::default(), &[&input]).unwrap();
        m.write(&path).unwrap();
        assert!(!RunManifest::read(&path).unwrap().complete);
        m.finish(&path, &[&input]).unwrap();
        let back = RunManifest::read(&path).unwrap();
        assert!(back.complete);
        assert_eq!(back, m);
    }
}
