//! Run manifests and report files.
//!
//! Every CLI command writes `manifest.json` next to its report: the command
//! line configuration, the seeds, and a SHA-256 of each input file, which is
//! enough to re-run and reproduce the report byte for byte.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest<C: Serialize> {
    pub command: String,
    pub tool_version: String,
    pub seeds: Vec<u64>,
    pub config: C,
    pub inputs: Vec<InputHash>,
}

/// SHA-256 of a file, or of every file under a directory (sorted by relative path).
pub fn hash_input(path: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            hasher.update(fs::read(&f)?);
        }
    } else {
        hasher.update(fs::read(path)?);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_content_based() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        fs::write(&a, b"{\"x\":1}").unwrap();
        let h1 = hash_input(&a).unwrap();
        assert_eq!(h1.len(), 64);
        fs::write(&a, b"{\"x\":2}").unwrap();
        assert_ne!(h1, hash_input(&a).unwrap());
        assert_eq!(hash_input(dir.path()).unwrap(), hash_input(dir.path()).unwrap());
    }
}
