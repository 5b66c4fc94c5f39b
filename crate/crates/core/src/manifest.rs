//! Append-only run manifest: one JSON line per executed command, recording
//! the config hash, seed and every produced artifact with its digest.

use crate::checkpoint::sha256_file;
use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub args: Vec<String>,
    pub config_sha256: String,
    pub seed: u64,
    pub outputs: Vec<ArtifactRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

pub struct RunManifest {
    path: PathBuf,
}

impl RunManifest {
    pub fn in_dir(out_dir: &Path) -> Self {
        RunManifest {
            path: out_dir.join("manifest.jsonl"),
        }
    }

    pub fn append(&self, mut entry: ManifestEntry, artifacts: &[PathBuf]) -> Result<()> {
        for p in artifacts {
            entry.outputs.push(ArtifactRef {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            });
        }
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        serde_json::to_writer(&mut f, &entry)?;
        writeln!(f)?;
        Ok(())
    }

    pub fn entries(&self) -> Result<Vec<ManifestEntry>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(&self.path)?;
        let mut out = Vec::new();
        for line in text.lines() {
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(line)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("out.txt");
        std::fs::write(&artifact, "payload").unwrap();
        let m = RunManifest::in_dir(dir.path());
        m.append(
            ManifestEntry {
                command: "train".into(),
                args: vec!["arae".into()],
                config_sha256: "0".into(),
                seed: 7,
                outputs: vec![],
            },
            &[artifact.clone()],
        )
        .unwrap();
        m.append(
            ManifestEntry {
                command: "evaluate".into(),
                args: vec!["all".into()],
                config_sha256: "0".into(),
                seed: 7,
                outputs: vec![],
            },
            &[],
        )
        .unwrap();
        let entries = m.entries().unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].outputs.len(), 1);
        assert!(std::path::Path::new(&entries[0].outputs[0].path).exists());
    }
}
