//! Run manifests and output-directory guarding.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
    pub outputs: Vec<OutputEntry>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<(String, u64)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Exclusive handle on an output directory. Holds `.lock` until dropped and
/// owns the manifest, which is written at creation and finalized by
/// [`RunDir::finish`].
pub struct RunDir {
    root: PathBuf,
    manifest: RunManifest,
    files: Vec<String>,
}

impl RunDir {
    /// Refuses a non-empty directory unless `overwrite` is set, and refuses a
    /// directory another invocation currently holds.
    pub fn open(
        root: &Path,
        overwrite: bool,
        command: &str,
        seed: u64,
        config: serde_json::Value,
    ) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let lock = root.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
        {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "{} is locked by another run (remove {} if stale)",
                    root.display(),
                    lock.display()
                )
            }
            Err(e) => return Err(e).with_context(|| format!("locking {}", root.display())),
        }
        let occupied = fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .any(|e| e.file_name() != LOCK_FILE);
        if occupied && !overwrite {
            let _ = fs::remove_file(&lock);
            bail!(
                "{} is not empty; pass --overwrite to replace its contents",
                root.display()
            );
        }
        let dir = Self {
            root: root.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                config,
                started_at: now(),
                finished_at: None,
                status: RunStatus::Running,
                outputs: Vec::new(),
            },
            files: Vec::new(),
        };
        dir.write_manifest()?;
        Ok(dir)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `contents` to `name` and records it for the manifest inventory.
    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.track(name);
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Records a file produced by other code.
    pub fn track(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    fn write_manifest(&self) -> anyhow::Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Digests every tracked file and finalizes the manifest.
    pub fn finish(mut self, ok: bool) -> anyhow::Result<RunManifest> {
        let mut outputs = Vec::with_capacity(self.files.len());
        for name in &self.files {
            let (sha256, bytes) = sha256_file(&self.root.join(name))?;
            outputs.push(OutputEntry {
                path: name.clone(),
                sha256,
                bytes,
            });
        }
        self.manifest.outputs = outputs;
        self.manifest.finished_at = Some(now());
        self.manifest.status = if ok { RunStatus::Ok } else { RunStatus::Failed };
        self.write_manifest()?;
        Ok(self.manifest.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK_FILE));
    }
}

/// A mismatch between a manifest entry and the file on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub path: String,
    pub problem: String,
}

/// Recomputes every digest listed in `dir`'s manifest.
pub fn verify(dir: &Path) -> anyhow::Result<(RunManifest, Vec<Mismatch>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: RunManifest =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut bad = Vec::new();
    for entry in &manifest.outputs {
        match sha256_file(&dir.join(&entry.path)) {
            Ok((digest, _)) if digest == entry.sha256 => {}
            Ok(_) => bad.push(Mismatch {
                path: entry.path.clone(),
                problem: "digest differs".into(),
            }),
            Err(_) => bad.push(Mismatch {
                path: entry.path.clone(),
                problem: "missing".into(),
            }),
        }
    }
    Ok((manifest, bad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lifecycle_lock_and_verify() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("run");
        let mut dir = RunDir::open(&root, false, "test", 3, serde_json::json!({"a": 1})).unwrap();
        let started: RunManifest =
            serde_json::from_str(&fs::read_to_string(root.join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(started.status, RunStatus::Running);
        assert!(RunDir::open(&root, true, "test", 3, serde_json::Value::Null).is_err());
        dir.write("a.txt", "hello").unwrap();
        let m = dir.finish(true).unwrap();
        assert_eq!(m.outputs.len(), 1);
        assert!(!root.join(LOCK_FILE).exists());

        assert!(verify(&root).unwrap().1.is_empty());
        fs::write(root.join("a.txt"), "tampered").unwrap();
        assert_eq!(verify(&root).unwrap().1.len(), 1);

        assert!(RunDir::open(&root, false, "test", 3, serde_json::Value::Null).is_err());
        assert!(!root.join(LOCK_FILE).exists());
        RunDir::open(&root, true, "test", 3, serde_json::Value::Null).unwrap();
    }
}
