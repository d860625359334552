//! Index directory layout:
//!
//! ```text
//! indices.json                  version, checkpoint hash, K, dim, ANN params
//! index_<k>/manifest.json       objective, count, dim, checkpoint hash
//! index_<k>/embeddings.bin      count * dim little-endian f64
//! index_<k>/ids.bin             count little-endian u32
//! weights.bin                   catalog size * K little-endian f64
//! weight_ids.bin                catalog size little-endian u32
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::index::{IvfParams, ObjectiveIndex};
use super::quota::ItemWeightStore;

pub const INDEX_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexSetManifest {
    pub version: u32,
    pub checkpoint_hash: String,
    pub k: usize,
    pub dim: usize,
    pub ivf: Option<IvfParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub objective: usize,
    pub count: usize,
    pub dim: usize,
    pub checkpoint_hash: String,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn f64_bytes(xs: &[f64]) -> Vec<u8> {
    xs.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn u32_bytes(xs: &[u32]) -> Vec<u8> {
    xs.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

fn u32s(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

fn json_line<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

pub fn write_indices(dir: &Path, indices: &[ObjectiveIndex], weights: &ItemWeightStore) -> Result<()> {
    let first = indices
        .first()
        .ok_or_else(|| Error::Index("no indices to write".into()))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for idx in indices {
        let sub = dir.join(format!("index_{}", idx.objective));
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        write(&sub.join("embeddings.bin"), &f64_bytes(idx.embeddings()))?;
        write(&sub.join("ids.bin"), &u32_bytes(idx.ids()))?;
        let m = IndexManifest {
            objective: idx.objective,
            count: idx.len(),
            dim: idx.dim,
            checkpoint_hash: idx.checkpoint_hash.clone(),
        };
        write(&sub.join("manifest.json"), &json_line(&m)?)?;
    }
    let (ids, w): (Vec<u32>, Vec<&[f64]>) = weights.iter().unzip();
    write(&dir.join("weight_ids.bin"), &u32_bytes(&ids))?;
    write(&dir.join("weights.bin"), &f64_bytes(&w.concat()))?;
    let set = IndexSetManifest {
        version: INDEX_VERSION,
        checkpoint_hash: first.checkpoint_hash.clone(),
        k: indices.len(),
        dim: first.dim,
        ivf: first.ivf_params.clone(),
    };
    write(&dir.join("indices.json"), &json_line(&set)?)
}

/// Loads an index directory. Approximate structures are rebuilt from the
/// stored parameters, which is deterministic.
pub fn read_indices(dir: &Path) -> Result<(IndexSetManifest, Vec<ObjectiveIndex>, ItemWeightStore)> {
    let set: IndexSetManifest = serde_json::from_slice(&read(&dir.join("indices.json"))?)?;
    if set.version != INDEX_VERSION {
        return Err(Error::Index(format!("unsupported index version {}", set.version)));
    }
    let mut indices = Vec::with_capacity(set.k);
    for k in 0..set.k {
        let sub = dir.join(format!("index_{k}"));
        let m: IndexManifest = serde_json::from_slice(&read(&sub.join("manifest.json"))?)?;
        if m.checkpoint_hash != set.checkpoint_hash || m.objective != k || m.dim != set.dim {
            return Err(Error::Index(format!("index_{k} disagrees with indices.json")));
        }
        let ids = u32s(&read(&sub.join("ids.bin"))?);
        let data = f64s(&read(&sub.join("embeddings.bin"))?);
        if ids.len() != m.count {
            return Err(Error::Index(format!("index_{k}: {} ids, manifest says {}", ids.len(), m.count)));
        }
        indices.push(ObjectiveIndex::build(k, m.dim, ids, data, m.checkpoint_hash, set.ivf.clone())?);
    }
    let ids = u32s(&read(&dir.join("weight_ids.bin"))?);
    let w = f64s(&read(&dir.join("weights.bin"))?);
    if w.len() != ids.len() * set.k {
        return Err(Error::Index("weights.bin size disagrees with weight_ids.bin".into()));
    }
    let mut store = ItemWeightStore::new(set.k);
    for (id, row) in ids.iter().zip(w.chunks_exact(set.k.max(1))) {
        store.insert(*id, row.to_vec())?;
    }
    Ok((set, indices, store))
}
