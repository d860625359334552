use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{MpFormer, UserInput};
use crate::objectives::quota_weights;

use super::index::{IvfParams, ObjectiveIndex, SearchResult};
use super::quota::{aggregate_user_weights, allocate_quota, ItemWeightStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    #[default]
    Exact,
    Approx,
}

/// Everything served for one request.
#[derive(Clone, Debug, PartialEq)]
pub struct ServingState {
    pub model: MpFormer,
    pub indices: Vec<ObjectiveIndex>,
    pub weights: ItemWeightStore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub item: u32,
    /// Best score over the objectives that returned the item.
    pub score: f64,
    pub objectives: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedResult {
    pub candidates: Vec<Candidate>,
    /// Realized per-objective quotas; they sum to the requested total.
    pub quota: Vec<usize>,
    /// The user's aggregated objective weights.
    pub weights: Vec<f64>,
}

/// One index per objective holding the items positive for it in the
/// training window, plus quota weights for the whole catalog.
pub fn build_indices(
    model: &MpFormer,
    ds: &Dataset,
    checkpoint_hash: &str,
    ivf: Option<IvfParams>,
) -> Result<(Vec<ObjectiveIndex>, ItemWeightStore)> {
    let k = model.config.k;
    if ds.n_objectives() != k {
        return Err(Error::invalid(format!(
            "dataset has {} objectives, model has {k}",
            ds.n_objectives()
        )));
    }
    let positives = ds.positive_items();
    let embs = model.item_embeddings(&ds.items)?;
    let d = model.config.d;
    let position: BTreeMap<u32, usize> = ds.items.iter().enumerate().map(|(p, f)| (f.item, p)).collect();
    let mut indices = Vec::with_capacity(k);
    for (obj, members) in positives.iter().enumerate() {
        if members.is_empty() {
            log::warn!("objective {obj} has no positive items; its index is empty");
        }
        let mut ids = Vec::with_capacity(members.len());
        let mut data = Vec::with_capacity(members.len() * d);
        for &item in members {
            let pos = *position
                .get(&item)
                .ok_or_else(|| Error::Index(format!("positive item {item} missing from catalog")))?;
            ids.push(item);
            data.extend_from_slice(&embs[pos].embeddings[obj]);
        }
        indices.push(ObjectiveIndex::build(obj, d, ids, data, checkpoint_hash, ivf.clone())?);
    }
    let mut store = ItemWeightStore::new(k);
    for (f, w) in ds.items.iter().zip(quota_weights(model, &ds.items)?) {
        store.insert(f.item, w)?;
    }
    Ok((indices, store))
}

/// Quotas over the non-empty indices: weights of empty indices are dropped,
/// the rest renormalised and re-floored so the total is preserved.
pub fn quota_for_indices(w: &[f64], sizes: &[usize], q_total: usize) -> Vec<usize> {
    let live: Vec<usize> = (0..w.len()).filter(|&k| sizes[k] > 0).collect();
    if live.len() == w.len() || live.is_empty() {
        return allocate_quota(w, q_total);
    }
    let s: f64 = live.iter().map(|&k| w[k]).sum();
    let sub: Vec<f64> = if s > 0.0 {
        live.iter().map(|&k| w[k] / s).collect()
    } else {
        vec![1.0 / live.len() as f64; live.len()]
    };
    let mut out = vec![0; w.len()];
    for (&k, q) in live.iter().zip(allocate_quota(&sub, q_total)) {
        out[k] = q;
    }
    out
}

/// Merges per-objective lists keeping each item once with its best score.
pub fn fuse(results: &[SearchResult]) -> Vec<Candidate> {
    let mut merged: BTreeMap<u32, (f64, BTreeSet<usize>)> = BTreeMap::new();
    for (k, r) in results.iter().enumerate() {
        for h in &r.hits {
            let e = merged.entry(h.item).or_insert((f64::NEG_INFINITY, BTreeSet::new()));
            e.0 = e.0.max(h.score);
            e.1.insert(k);
        }
    }
    let mut out: Vec<Candidate> = merged
        .into_iter()
        .map(|(item, (score, objs))| Candidate {
            item,
            score,
            objectives: objs.into_iter().collect(),
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item.cmp(&b.item)));
    out
}

impl ServingState {
    pub fn new(model: MpFormer, indices: Vec<ObjectiveIndex>, weights: ItemWeightStore) -> Result<Self> {
        let k = model.config.k;
        if indices.len() != k || weights.k != k {
            return Err(Error::Index(format!(
                "model has K = {k}, got {} indices and K = {} weights",
                indices.len(),
                weights.k
            )));
        }
        for (i, idx) in indices.iter().enumerate() {
            if idx.objective != i || idx.dim != model.config.d {
                return Err(Error::Index(format!("index {i} does not match the model")));
            }
        }
        Ok(ServingState {
            model,
            indices,
            weights,
        })
    }

    /// Weight calculation, parallel per-objective search, then fusion.
    pub fn retrieve(&self, user: &UserInput, q_total: usize, mode: SearchMode) -> Result<FusedResult> {
        let emb = self.model.user_embeddings(std::slice::from_ref(user))?;
        let emb = &emb[0].embeddings;
        let history: Vec<u32> = user.window(self.model.config.n_max).iter().map(|e| e.item).collect();
        let weights = aggregate_user_weights(&history, &self.weights);
        let sizes: Vec<usize> = self.indices.iter().map(ObjectiveIndex::len).collect();
        let quota = quota_for_indices(&weights, &sizes, q_total);
        let results: Vec<SearchResult> = self
            .indices
            .par_iter()
            .zip(quota.par_iter())
            .zip(emb.par_iter())
            .map(|((idx, &q), e)| match mode {
                SearchMode::Exact => idx.search_exact(e, q),
                SearchMode::Approx => idx.search_approx(e, q),
            })
            .collect::<Result<_>>()?;
        Ok(FusedResult {
            candidates: fuse(&results),
            quota,
            weights,
        })
    }
}
