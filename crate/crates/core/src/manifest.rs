//! Run manifests, content hashes and run-directory locks.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DasError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".lock";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| DasError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seed: Option<u64>,
    /// Hash over every input file's name and content, in the order listed.
    pub input_hash: String,
    pub inputs: Vec<FileHash>,
    pub output_dir: String,
    pub outputs: Vec<FileHash>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub timings: serde_json::Value,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Hashes each input and combines them into one digest. Directories
/// contribute their files in name order.
pub fn hash_inputs(paths: &[&Path]) -> Result<(String, Vec<FileHash>)> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| DasError::io(*p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|e| e.is_file())
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(p.to_path_buf());
        }
    }
    let mut all = Sha256::new();
    let mut hashes = Vec::with_capacity(files.len());
    for f in files {
        let h = file_sha256(&f)?;
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        all.update(name.as_bytes());
        all.update([0]);
        all.update(h.as_bytes());
        hashes.push(FileHash {
            path: f.display().to_string(),
            sha256: h,
        });
    }
    Ok((hex::encode(all.finalize()), hashes))
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        fs::write(&p, text).map_err(|e| DasError::io(&p, e))
    }
}

/// Hashes of the named files inside `dir`.
pub fn hash_outputs(dir: &Path, names: &[&str]) -> Result<Vec<FileHash>> {
    names
        .iter()
        .map(|n| {
            Ok(FileHash {
                path: (*n).to_string(),
                sha256: file_sha256(&dir.join(n))?,
            })
        })
        .collect()
}

/// Exclusive ownership of a run directory for the lifetime of the value.
/// A lock left behind by a process that no longer exists is taken over.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<RunLock> {
        fs::create_dir_all(dir).map_err(|e| DasError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id()).map_err(|e| DasError::io(&path, e))?;
                    return Ok(RunLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let owner = fs::read_to_string(&path).unwrap_or_default();
                    let pid: Option<u32> = owner.trim().parse().ok();
                    if pid.is_some_and(process_alive) {
                        return Err(DasError::usage(format!(
                            "{} is in use by process {}",
                            dir.display(),
                            owner.trim()
                        )));
                    }
                    fs::remove_file(&path).map_err(|e| DasError::io(&path, e))?;
                }
                Err(e) => return Err(DasError::io(&path, e)),
            }
        }
        Err(DasError::usage(format!("could not lock {}", dir.display())))
    }
}

fn process_alive(pid: u32) -> bool {
    if pid == std::process::id() {
        return true;
    }
    Path::new(&format!("/proc/{pid}")).exists()
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
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
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(DasError::Usage(_))));
        drop(lock);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn stale_lock_is_taken_over() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(LOCK_FILE), "4294967295").unwrap();
        assert!(RunLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn input_hash_depends_on_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        fs::write(&p, "{}").unwrap();
        let (h1, files) = hash_inputs(&[&p]).unwrap();
        assert_eq!(files.len(), 1);
        fs::write(&p, "{ }").unwrap();
        let (h2, _) = hash_inputs(&[&p]).unwrap();
        assert_ne!(h1, h2);
    }
}
