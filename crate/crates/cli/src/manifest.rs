use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Record of one command invocation, written into the output directory
/// before any long-running work starts.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
    /// SHA-256 over `blob <len>\0<effective config JSON>`, the way git hashes
    /// file contents.
    pub config_hash: String,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, inputs: Vec<PathBuf>, output_dir: &Path, seed: Option<u64>, config: &impl Serialize) -> Result<Self> {
        let body = serde_json::to_vec(config)?;
        Ok(RunManifest {
            command: command.to_owned(),
            config_path: config_path.map(Path::to_path_buf),
            inputs,
            output_dir: output_dir.to_path_buf(),
            seed,
            config_hash: content_hash(&body),
            version: env!("CARGO_PKG_VERSION").to_owned(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("manifest.json"), self)
    }
}

pub fn content_hash(body: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(body);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Creates `dir` for a fresh run. An existing non-empty directory is only
/// replaced when `force` is set. The directory is first built under a
/// temporary sibling name and renamed into place, so a half-created output
/// directory is never visible.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?.next().is_some();
        if non_empty && !force {
            bail!("output directory {} is not empty; pass --force to overwrite", dir.display());
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
    fs::create_dir(&staging).with_context(|| format!("creating {}", staging.display()))?;
    fs::rename(&staging, dir).with_context(|| format!("creating {}", dir.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_git_blob_convention() {
        let h = content_hash(b"hello\n");
        let mut s = Sha256::new();
        s.update(b"blob 6\0hello\n");
        let want: String = s.finalize().iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(h, want);
        assert_eq!(h.len(), 64);
    }

    #[test]
    fn refuses_non_empty_output_without_force() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        prepare_output(&out, false).unwrap();
        fs::write(out.join("x"), "1").unwrap();
        assert!(prepare_output(&out, false).is_err());
        prepare_output(&out, true).unwrap();
        assert_eq!(fs::read_dir(&out).unwrap().count(), 0);
    }
}
