//! Checkpoint files: a JSON manifest plus one little-endian `f64` blob.
//!
//! The manifest lists every tensor as (section, name, shape, dtype, byte
//! offset). Sections separate model parameters from optimizer state. The
//! checkpoint hash is the SHA-256 of the manifest bytes followed by the blob
//! bytes, so any change to tensors, step or config changes it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";
pub const FORMAT_VERSION: u32 = 1;
pub const PARAMS_SECTION: &str = "params";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub section: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub step: u64,
    /// Run configuration the checkpoint was produced under.
    pub config: serde_json::Value,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: serde_json::Value,
    /// Section name to tensors; `params` holds the model.
    pub sections: BTreeMap<String, ParamStore>,
}

impl Checkpoint {
    pub fn params(&self) -> Result<&ParamStore> {
        self.sections
            .get(PARAMS_SECTION)
            .ok_or_else(|| Error::Checkpoint("no params section".into()))
    }

    fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (section, store) in &self.sections {
            for (name, t) in store.iter() {
                tensors.push(TensorEntry {
                    section: section.clone(),
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                    offset: blob.len() as u64,
                });
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            step: self.step,
            config: self.config.clone(),
            blob: BLOB_FILE.into(),
            tensors,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        Ok((bytes, blob))
    }

    /// Writes the checkpoint into `dir` (created if missing) and returns its hash.
    pub fn save(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (manifest, blob) = self.encode()?;
        let blob_path = dir.join(BLOB_FILE);
        fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        // Manifest last: a reader never sees a manifest without its blob.
        let man_path = dir.join(MANIFEST_FILE);
        fs::write(&man_path, &manifest).map_err(|e| Error::io(&man_path, e))?;
        Ok(hash_bytes(&manifest, &blob))
    }

    /// Reads a checkpoint and returns it with its hash.
    pub fn load(dir: &Path) -> Result<(Checkpoint, String)> {
        let man_path = dir.join(MANIFEST_FILE);
        let man_bytes = fs::read(&man_path).map_err(|e| Error::io(&man_path, e))?;
        let manifest: Manifest = serde_json::from_slice(&man_bytes)?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {FORMAT_VERSION})",
                manifest.version
            )));
        }
        let blob_path = dir.join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;

        let mut sections: BTreeMap<String, ParamStore> = BTreeMap::new();
        for entry in &manifest.tensors {
            if entry.dtype != "f64" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 8 * n;
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| Error::Checkpoint(format!("{}: blob too short", entry.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            sections
                .entry(entry.section.clone())
                .or_default()
                .insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        }
        let hash = hash_bytes(&man_bytes, &blob);
        Ok((
            Checkpoint {
                step: manifest.step,
                config: manifest.config,
                sections,
            },
            hash,
        ))
    }
}

/// Hash of the checkpoint stored in `dir`, without decoding tensors.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let man_path = dir.join(MANIFEST_FILE);
    let man_bytes = fs::read(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&man_bytes)?;
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    Ok(hash_bytes(&man_bytes, &blob))
}

fn hash_bytes(manifest: &[u8], blob: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(manifest);
    h.update(blob);
    hex::encode(h.finalize())
}
