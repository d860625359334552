//! The twin towers: a user tower emitting one embedding per objective from a
//! causal decoder with shared attention projections, and an item tower with
//! one MLP per objective.

pub mod checkpoint;
mod config;
mod params;
pub mod tower;
mod types;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor};

pub use checkpoint::{checkpoint_hash, Checkpoint};
pub use config::{ModelConfig, Vocab};
pub use params::{init_params, is_quota_param};
pub use types::{BehaviorEvent, ItemFeatures, UserInput, UserProfile};

/// Rows per inference graph.
const CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct UserTowerOutput {
    /// `k` vectors of width `d`, in objective order.
    pub embeddings: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemTowerOutput {
    pub embeddings: Vec<Vec<f64>>,
}

/// A configured model with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MpFormer {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn split_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Turns per-objective `[B, d]` tensors into per-row K-vector outputs.
fn per_row(mats: &[Tensor]) -> Vec<Vec<Vec<f64>>> {
    let rows = mats.first().map_or(0, Tensor::rows);
    (0..rows)
        .map(|r| mats.iter().map(|m| m.row(r).to_vec()).collect())
        .collect()
}

impl MpFormer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(MpFormer { config, params })
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = init_params(&config, 0);
        for (name, t) in reference.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, config expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        if params.len() != reference.len() {
            return Err(Error::Checkpoint("checkpoint has parameters the config does not use".into()));
        }
        Ok(MpFormer { config, params })
    }

    /// User-tower embeddings, computed in independent chunks.
    pub fn user_embeddings(&self, inputs: &[UserInput]) -> Result<Vec<UserTowerOutput>> {
        let chunks: Vec<Result<Vec<UserTowerOutput>>> = inputs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = Graph::new();
                let b = self.params.bind_frozen(&mut g);
                let out = tower::user_tower(&mut g, &b, &self.config, chunk)?;
                let mats: Vec<Tensor> = out.embeddings.iter().map(|&v| g.value(v).clone()).collect();
                Ok(per_row(&mats)
                    .into_iter()
                    .map(|embeddings| UserTowerOutput { embeddings })
                    .collect())
            })
            .collect();
        let mut all = Vec::with_capacity(inputs.len());
        for c in chunks {
            all.extend(c?);
        }
        Ok(all)
    }

    /// Item-tower embeddings for `items`.
    pub fn item_embeddings(&self, items: &[ItemFeatures]) -> Result<Vec<ItemTowerOutput>> {
        let chunks: Vec<Result<Vec<ItemTowerOutput>>> = items
            .par_chunks(CHUNK * 4)
            .map(|chunk| {
                let mut g = Graph::new();
                let b = self.params.bind_frozen(&mut g);
                let feats = tower::item_features(&mut g, &b, &self.config, chunk)?;
                let outs = tower::item_tower(&mut g, &b, &self.config, feats)?;
                let mats: Vec<Tensor> = outs.iter().map(|&v| g.value(v).clone()).collect();
                Ok(per_row(&mats)
                    .into_iter()
                    .map(|embeddings| ItemTowerOutput { embeddings })
                    .collect())
            })
            .collect();
        let mut all = Vec::with_capacity(items.len());
        for c in chunks {
            all.extend(c?);
        }
        Ok(all)
    }

    /// Shared item features, one row per item.
    pub fn item_shared_features(&self, items: &[ItemFeatures]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let f = tower::item_features(&mut g, &b, &self.config, items)?;
        Ok(split_rows(g.value(f)))
    }
}

#[cfg(test)]
mod tests;
#[cfg(test)]
pub(crate) mod tests_support;
