use std::collections::BTreeSet;

/// `|top-k ∩ relevant| / min(|relevant|, k)`; zero for an empty relevant set.
pub fn recall_at_k(ranked: &[u32], relevant: &BTreeSet<u32>, k: usize) -> f64 {
    let denom = relevant.len().min(k);
    if denom == 0 {
        return 0.0;
    }
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count();
    hits as f64 / denom as f64
}

/// Binary-relevance NDCG with `1 / log2(p + 1)` discounts, normalised by the
/// ideal ordering over `min(|relevant|, k)` positions.
pub fn ndcg_at_k(ranked: &[u32], relevant: &BTreeSet<u32>, k: usize) -> f64 {
    let ideal_len = relevant.len().min(k);
    if ideal_len == 0 {
        return 0.0;
    }
    let discount = |p: usize| 1.0 / ((p + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(p, _)| discount(p + 1))
        .sum();
    let idcg: f64 = (1..=ideal_len).map(discount).sum();
    dcg / idcg
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn set(xs: &[u32]) -> BTreeSet<u32> {
        xs.iter().copied().collect()
    }

    #[test]
    fn recall_cases() {
        let ranked: Vec<u32> = (0..10).collect();
        assert_eq!(recall_at_k(&ranked, &set(&[1, 5]), 10), 1.0);
        assert_eq!(recall_at_k(&ranked, &set(&[20, 30]), 10), 0.0);
        assert_eq!(recall_at_k(&ranked, &set(&[2, 7, 40]), 10), 2.0 / 3.0);
        assert_eq!(recall_at_k(&ranked, &set(&[]), 10), 0.0);
        // More relevant items than k: the denominator is k.
        assert_eq!(recall_at_k(&ranked, &set(&[0, 1, 2, 50]), 2), 1.0);
    }

    #[test]
    fn ndcg_cases() {
        assert_eq!(ndcg_at_k(&[4, 1, 2], &set(&[4]), 1), 1.0);
        let v = ndcg_at_k(&[0, 9, 1], &set(&[9]), 10);
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((ndcg_at_k(&[3, 1, 8, 0], &set(&[3, 1, 8]), 10) - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn bounded_and_monotone_in_k(
            perm in Just((0u32..50).collect::<Vec<_>>()).prop_shuffle(),
            rel in prop::collection::btree_set(0u32..50, 0..20),
        ) {
            let mut last = (0.0, 0.0);
            for k in 1..=50 {
                let r = recall_at_k(&perm, &rel, k);
                let n = ndcg_at_k(&perm, &rel, k);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
                prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
                // Both normalisers grow with k until |rel|; from there on
                // they are fixed and both metrics can only rise.
                if k > rel.len() {
                    prop_assert!(r + 1e-12 >= last.0);
                    prop_assert!(n + 1e-12 >= last.1);
                }
                last = (r, n);
            }
        }
    }
}
