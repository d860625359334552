//! Per-objective inner-product indices with exact and partitioned search.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::dot;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub item: u32,
    pub score: f64,
}

/// Descending score, then ascending item id.
fn rank(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.item.cmp(&b.item))
}

/// Keeps the best `q` hits in rank order.
pub(crate) fn top_q(mut hits: Vec<Hit>, q: usize) -> Vec<Hit> {
    if q == 0 {
        return Vec::new();
    }
    if hits.len() > q {
        hits.select_nth_unstable_by(q - 1, rank);
        hits.truncate(q);
    }
    hits.sort_by(rank);
    hits
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub hits: Vec<Hit>,
    /// Fewer than the requested count were available.
    pub truncated: bool,
    /// Approximate search was asked for but the index has no partition
    /// structure, so the scan was exact.
    pub fell_back: bool,
}

/// Inverted-file build parameters. Lists are spherical k-means cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IvfParams {
    /// Number of cells; 0 picks `ceil(sqrt(n))`.
    pub n_lists: usize,
    /// Cells scanned per query; 0 picks 60% of the cells.
    pub n_probe: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for IvfParams {
    fn default() -> Self {
        IvfParams {
            n_lists: 0,
            n_probe: 0,
            iterations: 12,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Ivf {
    centroids: Vec<f64>,
    lists: Vec<Vec<usize>>,
    n_probe: usize,
}

/// Immutable set of (item id, embedding) rows for one objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveIndex {
    pub objective: usize,
    pub dim: usize,
    ids: Vec<u32>,
    data: Vec<f64>,
    pub checkpoint_hash: String,
    pub ivf_params: Option<IvfParams>,
    ivf: Option<Ivf>,
}

fn argmax_centroid(v: &[f64], centroids: &[f64], dim: usize) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (c, cent) in centroids.chunks_exact(dim).enumerate() {
        let s = dot(v, cent);
        if s > best.0 {
            best = (s, c);
        }
    }
    best.1
}

fn build_ivf(data: &[f64], dim: usize, p: &IvfParams) -> Ivf {
    let n = data.len() / dim;
    let n_lists = if p.n_lists == 0 {
        ((n as f64).sqrt().ceil() as usize).max(1)
    } else {
        p.n_lists
    }
    .min(n.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut centroids: Vec<f64> = sample(&mut rng, n, n_lists)
        .into_iter()
        .flat_map(|i| data[i * dim..(i + 1) * dim].to_vec())
        .collect();
    let mut assign = vec![0usize; n];
    for _ in 0..p.iterations {
        assign = (0..n)
            .into_par_iter()
            .map(|i| argmax_centroid(&data[i * dim..(i + 1) * dim], &centroids, dim))
            .collect();
        let mut sums = vec![0.0; n_lists * dim];
        let mut counts = vec![0usize; n_lists];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(&data[i * dim..(i + 1) * dim]) {
                *s += x;
            }
        }
        for c in 0..n_lists {
            if counts[c] == 0 {
                continue; // keep the old centroid for an empty cell
            }
            let cell = &mut sums[c * dim..(c + 1) * dim];
            let norm = dot(cell, cell).sqrt();
            if norm > 0.0 {
                cell.iter_mut().for_each(|v| *v /= norm);
                centroids[c * dim..(c + 1) * dim].copy_from_slice(cell);
            }
        }
    }
    let mut lists = vec![Vec::new(); n_lists];
    for (i, &c) in assign.iter().enumerate() {
        lists[c].push(i);
    }
    let n_probe = if p.n_probe == 0 {
        (3 * n_lists).div_ceil(5)
    } else {
        p.n_probe.min(n_lists)
    };
    Ivf {
        centroids,
        lists,
        n_probe,
    }
}

impl ObjectiveIndex {
    /// Builds an index over unit-norm rows. With `ivf` set, a partition
    /// structure for approximate search is trained as well.
    pub fn build(
        objective: usize,
        dim: usize,
        ids: Vec<u32>,
        data: Vec<f64>,
        checkpoint_hash: impl Into<String>,
        ivf: Option<IvfParams>,
    ) -> Result<Self> {
        if dim == 0 || data.len() != ids.len() * dim {
            return Err(Error::Index(format!(
                "{} ids but {} values for dim {dim}",
                ids.len(),
                data.len()
            )));
        }
        let unique: BTreeSet<u32> = ids.iter().copied().collect();
        if unique.len() != ids.len() {
            return Err(Error::Index("duplicate item id".into()));
        }
        for (row, id) in data.chunks_exact(dim).zip(&ids) {
            let n = dot(row, row).sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::Index(format!("item {id} embedding has norm {n}")));
            }
        }
        let structure = match &ivf {
            Some(p) if !ids.is_empty() => Some(build_ivf(&data, dim, p)),
            _ => None,
        };
        Ok(ObjectiveIndex {
            objective,
            dim,
            ids,
            data,
            checkpoint_hash: checkpoint_hash.into(),
            ivf_params: ivf,
            ivf: structure,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.data
    }

    pub fn has_ann(&self) -> bool {
        self.ivf.is_some()
    }

    fn check_query(&self, query: &[f64]) -> Result<()> {
        if query.len() != self.dim {
            return Err(Error::Index(format!(
                "query has dim {}, index has {}",
                query.len(),
                self.dim
            )));
        }
        Ok(())
    }

    fn score_rows(&self, query: &[f64], rows: impl Iterator<Item = usize>) -> Vec<Hit> {
        rows.map(|r| Hit {
            item: self.ids[r],
            score: dot(query, &self.data[r * self.dim..(r + 1) * self.dim]),
        })
        .collect()
    }

    /// Top-`q` by inner product over every row.
    pub fn search_exact(&self, query: &[f64], q: usize) -> Result<SearchResult> {
        self.check_query(query)?;
        let hits = top_q(self.score_rows(query, 0..self.len()), q);
        Ok(SearchResult {
            truncated: q > self.len(),
            hits,
            fell_back: false,
        })
    }

    /// Top-`q` over the cells whose centroids score highest for `query`.
    /// Scans every cell when `q` is at least the index size.
    pub fn search_approx(&self, query: &[f64], q: usize) -> Result<SearchResult> {
        self.check_query(query)?;
        let ivf = match &self.ivf {
            Some(ivf) if q < self.len() => ivf,
            Some(_) => return self.search_exact(query, q),
            None => {
                let mut r = self.search_exact(query, q)?;
                r.fell_back = true;
                return Ok(r);
            }
        };
        let cells: Vec<Hit> = ivf
            .centroids
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(c, cent)| Hit {
                item: c as u32,
                score: dot(query, cent),
            })
            .collect();
        let probe = top_q(cells, ivf.n_probe);
        let rows = probe.iter().flat_map(|c| ivf.lists[c.item as usize].iter().copied());
        let hits = top_q(self.score_rows(query, rows), q);
        Ok(SearchResult {
            truncated: hits.len() < q,
            hits,
            fell_back: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    pub(crate) fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_index(n: usize, dim: usize, seed: u64, ivf: Option<IvfParams>) -> ObjectiveIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n).flat_map(|_| random_unit(&mut rng, dim)).collect();
        ObjectiveIndex::build(0, dim, (0..n as u32).map(|i| i * 3 + 1).collect(), data, "h", ivf).unwrap()
    }

    #[test]
    fn self_query_ranks_first_and_zero_q_is_empty() {
        let idx = random_index(200, 8, 1, None);
        let q = idx.embeddings()[5 * 8..6 * 8].to_vec();
        let r = idx.search_exact(&q, 10).unwrap();
        assert_eq!(r.hits[0].item, idx.ids()[5]);
        assert!(idx.search_exact(&q, 0).unwrap().hits.is_empty());
        let all = idx.search_exact(&q, 500).unwrap();
        assert!(all.truncated);
        assert_eq!(all.hits.len(), 200);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let e = vec![1.0, 0.0];
        let data = [e.clone(), e.clone(), vec![0.0, 1.0], e.clone()].concat();
        let idx = ObjectiveIndex::build(0, 2, vec![9, 4, 1, 7], data, "h", None).unwrap();
        let r = idx.search_exact(&[1.0, 0.0], 3).unwrap();
        let ids: Vec<u32> = r.hits.iter().map(|h| h.item).collect();
        assert_eq!(ids, vec![4, 7, 9]);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(ObjectiveIndex::build(0, 2, vec![1, 1], vec![1.0, 0.0, 0.0, 1.0], "h", None).is_err());
        assert!(ObjectiveIndex::build(0, 2, vec![1], vec![2.0, 0.0], "h", None).is_err());
        assert!(ObjectiveIndex::build(0, 2, vec![1], vec![1.0], "h", None).is_err());
    }

    #[test]
    fn approx_without_structure_falls_back() {
        let idx = random_index(50, 4, 2, None);
        let r = idx.search_approx(&[0.5, 0.5, 0.5, 0.5], 5).unwrap();
        assert!(r.fell_back);
        assert_eq!(r.hits, idx.search_exact(&[0.5, 0.5, 0.5, 0.5], 5).unwrap().hits);
    }

    #[test]
    fn approx_is_deterministic_and_exhaustive_for_large_q() {
        let a = random_index(500, 8, 3, Some(IvfParams::default()));
        let b = random_index(500, 8, 3, Some(IvfParams::default()));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let q = random_unit(&mut rng, 8);
            assert_eq!(a.search_approx(&q, 30).unwrap(), b.search_approx(&q, 30).unwrap());
            assert_eq!(a.search_approx(&q, 500).unwrap().hits, a.search_exact(&q, 500).unwrap().hits);
        }
    }

    #[test]
    fn scores_are_nonincreasing() {
        let idx = random_index(300, 6, 5, None);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = idx.search_exact(&random_unit(&mut rng, 6), 300).unwrap();
        for w in r.hits.windows(2) {
            assert!(rank(&w[0], &w[1]) == Ordering::Less);
        }
    }
}
