//! Run manifests and the output-directory lock.
//!
//! Every command writes `<command>.manifest.json` beside its outputs:
//! the command, crate version, effective seed, and sha256 of each input
//! and output file. Timestamps live only in the manifest, so primary
//! artifacts stay byte-identical across reruns.

use anyhow::{Context, Result};
use enndola_core::io::sha256_hex;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Serialize)]
pub struct FileStamp {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: String,
    pub inputs: Vec<FileStamp>,
    pub outputs: Vec<FileStamp>,
    pub created_unix_ms: u128,
}

fn stamp(path: &Path) -> Result<FileStamp> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("hashing {}", path.display()))?;
    Ok(FileStamp {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

pub fn write_manifest(
    run_dir: &Path,
    command: &str,
    seed: u64,
    config_path: &Path,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<PathBuf> {
    let manifest = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config: config_path.display().to_string(),
        inputs: inputs.iter().map(|p| stamp(p)).collect::<Result<_>>()?,
        outputs: outputs.iter().map(|p| stamp(p)).collect::<Result<_>>()?,
        created_unix_ms: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0),
    };
    let path = run_dir.join(format!("{command}.manifest.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Exclusive lock on a run directory; concurrent invocations against the
/// same directory are rejected. Removed on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(run_dir)
            .with_context(|| format!("creating run dir {}", run_dir.display()))?;
        let path = run_dir.join(".enndola.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(anyhow::anyhow!(
                "run directory {} is locked by another enndola invocation \
                 (remove {} if that run is dead)",
                run_dir.display(),
                path.display()
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
