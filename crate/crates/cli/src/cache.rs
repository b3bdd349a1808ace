//! Content-addressed stage outputs.
//!
//! A stage's key hashes its name, the config it reads and the output hashes
//! of the stages it consumes. Outputs live in `<root>/<stage>-<key>/`; a
//! `COMPLETE` file inside records the hash of everything else in the
//! directory. A directory is reused only when that hash still matches its
//! contents, so a damaged or half-written output is rebuilt instead of served.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::Result;

const MARKER: &str = "COMPLETE";

/// Hash of length-prefixed parts; no two part lists collide by concatenation.
pub fn hash_parts(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.strip_prefix(root).ok() != Some(Path::new(MARKER)) {
            out.push(path);
        }
    }
    Ok(())
}

/// Hash over every file below `dir` (marker excluded), by relative path.
pub fn hash_dir(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        let bytes = std::fs::read(&f)?;
        for part in [rel.as_bytes(), &bytes[..]] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Result of [`StageCache::run`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutput {
    pub dir: PathBuf,
    pub hash: String,
    pub cached: bool,
}

#[derive(Debug, Clone)]
pub struct StageCache {
    root: PathBuf,
}

impl StageCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dir(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join(format!("{stage}-{key}"))
    }

    /// Output hash of a complete, intact entry.
    pub fn lookup(&self, stage: &str, key: &str) -> Option<String> {
        let dir = self.dir(stage, key);
        let recorded = std::fs::read_to_string(dir.join(MARKER)).ok()?;
        let actual = hash_dir(&dir).ok()?;
        (recorded.trim() == actual).then_some(actual)
    }

    /// Reuses the entry for `key` or builds it with `build`, which writes
    /// into the directory it is given.
    pub fn run(&self, stage: &str, key: &str, build: impl FnOnce(&Path) -> Result<()>) -> Result<StageOutput> {
        let dir = self.dir(stage, key);
        if let Some(hash) = self.lookup(stage, key) {
            return Ok(StageOutput { dir, hash, cached: true });
        }
        let tmp = self.root.join(format!("{stage}-{key}.partial"));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;
        build(&tmp)?;
        let hash = hash_dir(&tmp)?;
        std::fs::write(tmp.join(MARKER), format!("{hash}\n"))?;
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::rename(&tmp, &dir)?;
        Ok(StageOutput { dir, hash, cached: false })
    }
}
