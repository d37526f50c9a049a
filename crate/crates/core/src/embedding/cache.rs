//! Persistent content-addressed embedding store.
//!
//! Layout: `<root>/<first two hex chars>/<64 hex chars>`. Each file holds a
//! little-endian `u32` dimension followed by that many little-endian `f32`s.
//! Writers go through a temporary file and `rename`, so readers only ever
//! see complete entries.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use log::warn;
use serde::Serialize;

use super::CacheKey;
use crate::error::{Error, Result};

const TMP_MARKER: &str = ".tmp.";

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    root: PathBuf,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CacheEntryProblem {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GcReport {
    pub removed_temp_files: u64,
    pub removed_corrupt: u64,
}

fn encode(values: &[f32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(4 + 4 * values.len());
    buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn decode(bytes: &[u8]) -> std::result::Result<Vec<f32>, String> {
    if bytes.len() < 4 {
        return Err(format!("{} bytes, shorter than the dim header", bytes.len()));
    }
    let dim = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let expected = 4 + 4 * dim;
    if dim == 0 || bytes.len() != expected {
        return Err(format!(
            "dim header {dim} implies {expected} bytes, file has {}",
            bytes.len()
        ));
    }
    let values: Vec<f32> = bytes[4..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err("non-finite component".into());
    }
    Ok(values)
}

impl EmbeddingCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        let hex = key.to_hex();
        self.root.join(&hex[..2]).join(hex)
    }

    /// Returns the stored vector, or `None` if absent. Corrupt entries are
    /// reported and treated as misses so they get rewritten.
    pub fn get(&self, key: &CacheKey) -> Result<Option<Vec<f32>>> {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        match decode(&bytes) {
            Ok(v) => Ok(Some(v)),
            Err(reason) => {
                warn!("ignoring corrupt cache entry {}: {reason}", path.display());
                Ok(None)
            }
        }
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.path_for(key).is_file()
    }

    pub fn put(&self, key: &CacheKey, values: &[f32]) -> Result<()> {
        let path = self.path_for(key);
        let dir = path.parent().expect("entry has a fan-out dir");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = dir.join(format!(
            "{}{TMP_MARKER}{}.{}",
            key.to_hex(),
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&encode(values))
            .and_then(|_| f.sync_data())
            .map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Visits every file under the fan-out directories.
    fn walk(&self, mut visit: impl FnMut(&Path, &str) -> Result<()>) -> Result<()> {
        let top = fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let mut dirs: Vec<PathBuf> = top
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for dir in dirs {
            let mut files: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for path in files {
                let name = path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                visit(&path, &name)?;
            }
        }
        Ok(())
    }

    pub fn stats(&self) -> Result<CacheStats> {
        let mut stats = CacheStats::default();
        self.walk(|path, name| {
            if CacheKey::from_hex(name).is_some() {
                stats.entries += 1;
                stats.bytes += fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
            }
            Ok(())
        })?;
        Ok(stats)
    }

    /// Re-checks every entry: file name must be a key in its own fan-out
    /// directory and the payload must decode.
    pub fn verify(&self) -> Result<Vec<CacheEntryProblem>> {
        let mut problems = Vec::new();
        self.walk(|path, name| {
            if name.contains(TMP_MARKER) {
                return Ok(());
            }
            let reason = match CacheKey::from_hex(name) {
                None => Some("file name is not a 64-char lowercase hex digest".to_string()),
                Some(key) if self.path_for(&key) != path => {
                    Some("entry is in the wrong fan-out directory".to_string())
                }
                Some(_) => {
                    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                    decode(&bytes).err()
                }
            };
            if let Some(reason) = reason {
                problems.push(CacheEntryProblem {
                    path: path.to_path_buf(),
                    reason,
                });
            }
            Ok(())
        })?;
        Ok(problems)
    }

    /// Removes stale temporary files and corrupt entries.
    pub fn gc(&self) -> Result<GcReport> {
        let mut report = GcReport::default();
        let mut temps = Vec::new();
        self.walk(|path, name| {
            if name.contains(TMP_MARKER) {
                temps.push(path.to_path_buf());
            }
            Ok(())
        })?;
        for t in temps {
            fs::remove_file(&t).map_err(|e| Error::io(&t, e))?;
            report.removed_temp_files += 1;
        }
        for p in self.verify()? {
            fs::remove_file(&p.path).map_err(|e| Error::io(&p.path, e))?;
            report.removed_corrupt += 1;
        }
        Ok(report)
    }
}
