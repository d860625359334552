//! Offline metrics on the held-out day, the attention cost model and the
//! cross-objective similarity probe.

mod cost;
mod metrics;
mod probe;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, OBJECTIVE_NAMES};
use crate::error::{Error, Result};
use crate::model::MpFormer;
use crate::numerics::kernels::dot;
use crate::retrieval::{top_q, Hit, ObjectiveIndex};

pub use cost::{cost_table, qkv_cost, CostModelInput, QkvMode};
pub use metrics::{ndcg_at_k, recall_at_k};
pub use probe::{cosine, similarity_probe, ProbeStats, HISTOGRAM_BINS};

pub const RECALL_AT: [usize; 3] = [10, 50, 100];
pub const NDCG_AT: [usize; 3] = [1, 10, 100];

/// Candidate universe for ranking.
#[derive(Clone, Copy, Debug)]
pub enum EvalTarget<'a> {
    /// Every catalog item, scored by objective k's item tower.
    FullCatalog,
    /// Only the items stored in objective k's index.
    Indices(&'a [ObjectiveIndex]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    FullCatalog,
    InIndex,
}

/// A ranking universe for one objective: ids with row-major embeddings.
#[derive(Clone, Copy, Debug)]
pub struct Catalog<'a> {
    pub ids: &'a [u32],
    pub data: &'a [f64],
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveMetrics {
    pub objective: String,
    /// Users with at least one relevant item, over whom metrics are averaged.
    pub users: usize,
    pub recall: Vec<(usize, f64)>,
    pub ndcg: Vec<(usize, f64)>,
    /// Expected recall of a uniformly random ranking of the same universe.
    pub random_recall: Vec<(usize, f64)>,
}

impl ObjectiveMetrics {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(c, _)| *c == k).map(|p| p.1)
    }

    pub fn random_recall_at(&self, k: usize) -> Option<f64> {
        self.random_recall.iter().find(|(c, _)| *c == k).map(|p| p.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub objectives: Vec<ObjectiveMetrics>,
    /// Users with no training-window history.
    pub skipped_no_history: usize,
    /// Per objective, evaluated users with no relevant held-out item.
    pub no_relevant: Vec<usize>,
    /// `(K, independent, shared)` projection-block operation counts.
    #[serde(default)]
    pub cost: Vec<(u64, u128, u128)>,
    #[serde(default)]
    pub probe: Option<ProbeStats>,
}

/// Expected `recall@k` of a random ranking of `universe` items, `hits` of
/// which are among the `relevant` ones.
fn random_recall(relevant: usize, hits: usize, universe: usize, k: usize) -> f64 {
    let denom = relevant.min(k);
    if denom == 0 || universe == 0 {
        return 0.0;
    }
    hits as f64 * k.min(universe) as f64 / universe as f64 / denom as f64
}

fn rank(query: &[f64], cat: &Catalog<'_>, q: usize) -> Vec<u32> {
    let hits: Vec<Hit> = cat
        .data
        .chunks_exact(cat.dim)
        .zip(cat.ids)
        .map(|(row, &item)| Hit {
            item,
            score: dot(query, row),
        })
        .collect();
    top_q(hits, q).into_iter().map(|h| h.item).collect()
}

/// Metrics for precomputed user embeddings. `users[u][k]` is user u's
/// objective-k vector, `relevant[u][k]` their relevant set, `catalogs[k]`
/// the universe ranked for objective k.
pub fn evaluate_embeddings(
    users: &[Vec<Vec<f64>>],
    relevant: &[Vec<BTreeSet<u32>>],
    catalogs: &[Catalog<'_>],
    names: &[&str],
) -> Vec<ObjectiveMetrics> {
    let depth = RECALL_AT.iter().chain(&NDCG_AT).copied().max().unwrap_or(0);
    catalogs
        .iter()
        .enumerate()
        .map(|(k, cat)| {
            let members: BTreeSet<u32> = cat.ids.iter().copied().collect();
            let rows: Vec<Vec<f64>> = users
                .par_iter()
                .zip(relevant)
                .filter(|(_, rel)| !rel[k].is_empty())
                .map(|(u, rel)| {
                    let rel = &rel[k];
                    let ranked = rank(&u[k], cat, depth);
                    let in_universe = rel.intersection(&members).count();
                    RECALL_AT
                        .iter()
                        .map(|&c| recall_at_k(&ranked, rel, c))
                        .chain(NDCG_AT.iter().map(|&c| ndcg_at_k(&ranked, rel, c)))
                        .chain(
                            RECALL_AT
                                .iter()
                                .map(|&c| random_recall(rel.len(), in_universe, cat.ids.len(), c)),
                        )
                        .collect()
                })
                .collect();
            // Sequential sums keep the result independent of thread count.
            let n = rows.len();
            let mut sums = vec![0.0; RECALL_AT.len() * 2 + NDCG_AT.len()];
            for r in &rows {
                for (s, v) in sums.iter_mut().zip(r) {
                    *s += v;
                }
            }
            let mean = |i: usize| if n == 0 { 0.0 } else { sums[i] / n as f64 };
            let nr = RECALL_AT.len();
            let nn = NDCG_AT.len();
            ObjectiveMetrics {
                objective: names.get(k).map_or_else(|| format!("objective_{k}"), |s| s.to_string()),
                users: n,
                recall: RECALL_AT.iter().enumerate().map(|(i, &c)| (c, mean(i))).collect(),
                ndcg: NDCG_AT.iter().enumerate().map(|(i, &c)| (c, mean(nr + i))).collect(),
                random_recall: RECALL_AT
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| (c, mean(nr + nn + i)))
                    .collect(),
            }
        })
        .collect()
}

/// Held-out items positive for each objective, per user.
pub fn holdout_relevant(ds: &Dataset) -> Vec<Vec<BTreeSet<u32>>> {
    ds.examples
        .iter()
        .map(|stream| {
            let mut sets = vec![BTreeSet::new(); ds.n_objectives()];
            for e in stream.iter().filter(|e| e.ts >= ds.holdout_start) {
                for (k, l) in e.labels().iter().enumerate() {
                    if *l == 1 {
                        sets[k].insert(e.item);
                    }
                }
            }
            sets
        })
        .collect()
}

/// Ranks for every user with history at the holdout boundary and averages
/// the metrics per objective.
pub fn evaluate(model: &MpFormer, ds: &Dataset, target: EvalTarget<'_>) -> Result<EvalReport> {
    let k = model.config.k;
    if ds.n_objectives() != k {
        return Err(Error::invalid(format!("dataset has {} objectives, model has {k}", ds.n_objectives())));
    }
    let n_max = model.config.n_max;
    let all_relevant = holdout_relevant(ds);
    let mut inputs = Vec::new();
    let mut relevant = Vec::new();
    let mut skipped = 0;
    for (u, rel) in all_relevant.into_iter().enumerate() {
        let input = ds.user_input_at_holdout(u, n_max);
        if input.history.is_empty() {
            skipped += 1;
            continue;
        }
        inputs.push(input);
        relevant.push(rel);
    }
    let users: Vec<Vec<Vec<f64>>> = model
        .user_embeddings(&inputs)?
        .into_iter()
        .map(|o| o.embeddings)
        .collect();

    let full: Vec<(Vec<u32>, Vec<f64>)>;
    let (mode, catalogs): (EvalMode, Vec<Catalog<'_>>) = match target {
        EvalTarget::FullCatalog => {
            let embs = model.item_embeddings(&ds.items)?;
            let ids: Vec<u32> = ds.items.iter().map(|f| f.item).collect();
            full = (0..k)
                .map(|obj| (ids.clone(), embs.iter().flat_map(|e| e.embeddings[obj].iter().copied()).collect()))
                .collect();
            let cats = full
                .iter()
                .map(|(ids, data)| Catalog {
                    ids,
                    data,
                    dim: model.config.d,
                })
                .collect();
            (EvalMode::FullCatalog, cats)
        }
        EvalTarget::Indices(indices) => {
            if indices.len() != k {
                return Err(Error::Index(format!("{} indices for K = {k}", indices.len())));
            }
            let cats = indices
                .iter()
                .map(|idx| Catalog {
                    ids: idx.ids(),
                    data: idx.embeddings(),
                    dim: idx.dim,
                })
                .collect();
            (EvalMode::InIndex, cats)
        }
    };
    let objectives = evaluate_embeddings(&users, &relevant, &catalogs, &OBJECTIVE_NAMES);
    let no_relevant = (0..k)
        .map(|obj| relevant.iter().filter(|r| r[obj].is_empty()).count())
        .collect();
    Ok(EvalReport {
        mode,
        objectives,
        skipped_no_history: skipped,
        no_relevant,
        cost: Vec::new(),
        probe: None,
    })
}

/// User embeddings at the holdout boundary for users with history.
pub fn holdout_user_embeddings(model: &MpFormer, ds: &Dataset) -> Result<Vec<Vec<Vec<f64>>>> {
    let inputs: Vec<_> = (0..ds.users.len())
        .map(|u| ds.user_input_at_holdout(u, model.config.n_max))
        .filter(|i| !i.history.is_empty())
        .collect();
    Ok(model
        .user_embeddings(&inputs)?
        .into_iter()
        .map(|o| o.embeddings)
        .collect())
}

impl EvalReport {
    /// One `objective metric k value` line per metric.
    pub fn metric_lines(&self) -> String {
        let mut out = String::new();
        for m in &self.objectives {
            for (c, v) in &m.recall {
                let _ = writeln!(out, "{} recall {c} {v:.6}", m.objective);
            }
            for (c, v) in &m.ndcg {
                let _ = writeln!(out, "{} ndcg {c} {v:.6}", m.objective);
            }
            for (c, v) in &m.random_recall {
                let _ = writeln!(out, "{} random_recall {c} {v:.6}", m.objective);
            }
        }
        out
    }

    /// Human-readable summary with the metric grid, cost table and probe.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode: {:?}, users skipped (no history): {}", self.mode, self.skipped_no_history);
        let mut header = format!("{:<10}{:>7}", "objective", "users");
        for c in RECALL_AT {
            header += &format!("{:>11}", format!("recall@{c}"));
        }
        for c in NDCG_AT {
            header += &format!("{:>11}", format!("ndcg@{c}"));
        }
        let _ = writeln!(out, "{header}");
        for m in &self.objectives {
            let mut line = format!("{:<10}{:>7}", m.objective, m.users);
            for (_, v) in m.recall.iter().chain(&m.ndcg) {
                line += &format!("{v:>11.4}");
            }
            let _ = writeln!(out, "{line}");
        }
        if !self.cost.is_empty() {
            let _ = writeln!(out, "{:>4}{:>16}{:>16}{:>8}", "K", "independent", "shared", "ratio");
            for (k, i, s) in &self.cost {
                let _ = writeln!(out, "{k:>4}{i:>16}{s:>16}{:>8.3}", *i as f64 / *s as f64);
            }
        }
        if let Some(p) = &self.probe {
            let _ = writeln!(out, "cross-objective cosine: mean {:.4}, std {:.4} over {} pairs", p.mean, p.std, p.pairs);
        }
        out
    }
}
