use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to every command's outputs.
#[derive(Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: Option<u64>,
    /// Hash over all input hashes, in listed order.
    pub config_hash: String,
    pub inputs: Vec<InputFile>,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Seconds since the epoch, pinned by SOURCE_DATE_EPOCH when set so
/// reruns can produce identical manifests.
pub fn now_unix() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
        return v;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Every regular file below `dir`, sorted.
pub fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

impl RunManifest {
    /// `inputs` pairs a display name with the file to hash.
    pub fn new(command: &str, seed: Option<u64>, inputs: &[(String, PathBuf)], started: u64) -> Result<Self> {
        let mut files = Vec::with_capacity(inputs.len());
        let mut all = Sha256::new();
        for (name, p) in inputs {
            let h = sha256_file(p)?;
            all.update(name.as_bytes());
            all.update(h.as_bytes());
            files.push(InputFile {
                path: name.clone(),
                sha256: h,
            });
        }
        Ok(RunManifest {
            tool: "motion4d",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            config_hash: format!("{:x}", all.finalize()),
            inputs: files,
            started_unix_s: started,
            finished_unix_s: now_unix(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
