//! Self-describing checkpoint container: a magic tag, a JSON header (format
//! version, stage tag, embedded config, vocabulary, dimensions, upstream
//! checkpoint hashes, tensor index) and a raw little-endian f64 blob.

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use cxrjust_nn::Arr;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CXRCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f64 elements into the data blob.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Stage tag: arae | gan1 | gan1-baseline | gan2 | invmap | refcnn.
    pub stage: String,
    /// The pipeline config that produced this checkpoint, as TOML text.
    pub config_toml: String,
    pub vocab: Option<Vocabulary>,
    pub embedding_dim: usize,
    pub noise_dim: usize,
    /// Hex SHA-256 of the upstream checkpoints this one was trained against.
    pub upstream: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, state: &[(String, Arr)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut meta = meta.clone();
    meta.format_version = FORMAT_VERSION;
    meta.tensors.clear();
    let mut offset = 0usize;
    for (name, arr) in state {
        meta.tensors.push(TensorEntry {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            offset,
        });
        offset += arr.len();
    }
    let header = serde_json::to_vec(&meta)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    for (_, arr) in state {
        let std_arr = arr.as_standard_layout();
        for v in std_arr.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<(String, Arr)>)> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len = [0u8; 8];
    f.read_exact(&mut len)?;
    let hlen = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; hlen];
    f.read_exact(&mut header)?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}",
            meta.format_version
        )));
    }
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;
    if blob.len() % 8 != 0 {
        return Err(Error::Checkpoint("truncated tensor blob".into()));
    }
    let data: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut out = Vec::with_capacity(meta.tensors.len());
    for t in &meta.tensors {
        let n: usize = t.shape.iter().product();
        let end = t.offset + n;
        if end > data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} exceeds blob length",
                t.name
            )));
        }
        let arr = Arr::from_shape_vec(ndarray::IxDyn(&t.shape), data[t.offset..end].to_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.push((t.name.clone(), arr));
    }
    Ok((meta, out))
}

/// Hex SHA-256 of a file; the provenance key used in run manifests and
/// upstream guards.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex_string(&h.finalize()))
}

pub fn sha256_str(s: &str) -> String {
    let mut h = Sha256::new();
    h.update(s.as_bytes());
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn round_trip_preserves_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let state = vec![
            (
                "layer.w".to_string(),
                Arr::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -2.5, 3.0, 0.25, 1e-9, 7.0])
                    .unwrap(),
            ),
            (
                "layer.b".to_string(),
                Arr::from_shape_vec(IxDyn(&[3]), vec![0.0, -1.0, 2.0]).unwrap(),
            ),
        ];
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            stage: "arae".into(),
            config_toml: "seed = 7".into(),
            vocab: None,
            embedding_dim: 300,
            noise_dim: 100,
            upstream: BTreeMap::new(),
            tensors: vec![],
        };
        save_checkpoint(&path, &meta, &state).unwrap();
        let (m2, s2) = load_checkpoint(&path).unwrap();
        assert_eq!(m2.stage, "arae");
        assert_eq!(m2.embedding_dim, 300);
        assert_eq!(s2.len(), 2);
        for ((n1, a1), (n2, a2)) in state.iter().zip(&s2) {
            assert_eq!(n1, n2);
            assert_eq!(a1, a2);
        }
    }

    #[test]
    fn rejects_non_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn file_hash_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"abc").unwrap();
        assert_eq!(
            sha256_file(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
