use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Dataset, ExampleRef};

/// Training candidates: examples positive for at least one objective.
pub fn positive_indices(ds: &Dataset, refs: &[ExampleRef]) -> Vec<ExampleRef> {
    refs.iter()
        .copied()
        .filter(|&r| ds.get(r).any_positive())
        .collect()
}

/// Shuffles `refs` with `seed` and cuts them into batches of exactly `n`
/// rows, dropping the final partial batch. Within a batch every row's item
/// is a shared negative for every other row, for all objectives.
pub fn make_batches(refs: &[ExampleRef], n: usize, seed: u64) -> Result<Vec<Vec<ExampleRef>>> {
    if n < 2 {
        return Err(Error::invalid(format!("batch size must be at least 2, got {n}")));
    }
    let mut order = refs.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks_exact(n).map(<[_]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batches_only_and_seeded_order() {
        let refs: Vec<ExampleRef> = (0..23).map(|i| (i % 4, i)).collect();
        let a = make_batches(&refs, 5, 9).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|b| b.len() == 5));
        assert_eq!(a, make_batches(&refs, 5, 9).unwrap());
        assert_ne!(a, make_batches(&refs, 5, 10).unwrap());
        assert!(make_batches(&refs, 1, 9).is_err());
    }
}
