//! Per-item objective weights, per-user aggregation and quota allocation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::softmax_in_place;

/// Item id to its quota-head weights, materialised at index-build time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemWeightStore {
    pub k: usize,
    weights: BTreeMap<u32, Vec<f64>>,
}

impl ItemWeightStore {
    pub fn new(k: usize) -> Self {
        ItemWeightStore {
            k,
            weights: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, item: u32, w: Vec<f64>) -> Result<()> {
        if w.len() != self.k {
            return Err(Error::invalid(format!("weight vector of length {} for K = {}", w.len(), self.k)));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-9 || w.iter().any(|&x| x < 0.0) {
            return Err(Error::invalid(format!("weights of item {item} are not a simplex (sum {s})")));
        }
        self.weights.insert(item, w);
        Ok(())
    }

    pub fn get(&self, item: u32) -> Option<&[f64]> {
        self.weights.get(&item).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &[f64])> {
        self.weights.iter().map(|(&i, w)| (i, w.as_slice()))
    }

    /// Mean weight vector over every stored item.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.k];
        for w in self.weights.values() {
            for (a, b) in m.iter_mut().zip(w) {
                *a += b;
            }
        }
        let n = self.weights.len().max(1) as f64;
        m.iter().map(|v| v / n).collect()
    }
}

/// `softmax(sum of w_i)` over `history` items; items missing from the store
/// add nothing, so an empty history gives the uniform vector.
pub fn aggregate_user_weights(history: &[u32], store: &ItemWeightStore) -> Vec<f64> {
    let mut acc = vec![0.0; store.k];
    for w in history.iter().filter_map(|&i| store.get(i)) {
        for (a, b) in acc.iter_mut().zip(w) {
            *a += b;
        }
    }
    softmax_in_place(&mut acc, 1.0);
    acc
}

/// Splits `q_total` by `floor(w_k * q_total)` and hands the leftover out one
/// by one in order of largest fractional part, ties to the lower objective.
pub fn allocate_quota(w: &[f64], q_total: usize) -> Vec<usize> {
    let k = w.len();
    if k == 0 {
        return Vec::new();
    }
    let exact: Vec<f64> = w.iter().map(|&x| x.max(0.0) * q_total as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = quota.iter().sum();
    let mut left = q_total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    // Normally left < k; a weight vector summing below one can leave more.
    while left > 0 {
        for &j in &order {
            if left == 0 {
                break;
            }
            quota[j] += 1;
            left -= 1;
        }
    }
    quota
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn baseline_and_mean_quota_splits() {
        assert_eq!(allocate_quota(&[1.0 / 3.0; 3], 3000), vec![1000, 1000, 1000]);
        assert_eq!(allocate_quota(&[0.35, 0.18, 0.47], 3000), vec![1050, 540, 1410]);
    }

    #[test]
    fn remainder_goes_to_largest_fraction_then_lower_index() {
        // Exact shares 1.5, 1.5, 1.0 of 4 -> floors 1, 1, 1 and one left.
        assert_eq!(allocate_quota(&[0.375, 0.375, 0.25], 4), vec![2, 1, 1]);
        assert_eq!(allocate_quota(&[0.2, 0.5, 0.3], 7), vec![1, 4, 2]);
    }

    #[test]
    fn budget_is_always_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let k = rng.random_range(1..6);
            let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let q = rng.random_range(0..5000);
            assert_eq!(allocate_quota(&w, q).iter().sum::<usize>(), q);
        }
    }

    #[test]
    fn large_budgets_track_the_weights() {
        let w = [0.123_456_7, 0.654_321, 1.0 - 0.123_456_7 - 0.654_321];
        let q = 1_000_000;
        for (a, b) in allocate_quota(&w, q).iter().zip(w) {
            assert!((*a as f64 / q as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn aggregation() {
        let mut store = ItemWeightStore::new(3);
        store.insert(1, vec![0.5, 0.25, 0.25]).unwrap();
        store.insert(2, vec![0.5, 0.25, 0.25]).unwrap();
        assert!(store.insert(3, vec![0.5, 0.6, 0.0]).is_err());
        assert_eq!(aggregate_user_weights(&[], &store), vec![1.0 / 3.0; 3]);
        assert_eq!(aggregate_user_weights(&[77], &store), vec![1.0 / 3.0; 3]);

        // n identical items: softmax(n * w)
        let got = aggregate_user_weights(&[1, 2, 1], &store);
        let z = [1.5f64.exp(), 0.75f64.exp(), 0.75f64.exp()];
        let s: f64 = z.iter().sum();
        for (g, e) in got.iter().zip(z) {
            assert!((g - e / s).abs() < 1e-15);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
