//! Cross-objective similarity of user embeddings.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::numerics::kernels::dot;

pub const HISTOGRAM_BINS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    /// Number of `(user, j < k)` pairs.
    pub pairs: usize,
    pub mean: f64,
    pub std: f64,
    /// Counts over `HISTOGRAM_BINS` equal bins spanning [-1, 1].
    pub histogram: Vec<usize>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Pairwise cosines between each user's objective embeddings.
pub fn similarity_probe(users: &[Vec<Vec<f64>>]) -> ProbeStats {
    let mut sims = Vec::new();
    for embs in users {
        for j in 0..embs.len() {
            for k in j + 1..embs.len() {
                sims.push(cosine(&embs[j], &embs[k]));
            }
        }
    }
    let n = sims.len();
    let mean = sims.iter().sum::<f64>() / n.max(1) as f64;
    let var = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
    let mut histogram = vec![0; HISTOGRAM_BINS];
    for s in &sims {
        let b = ((s + 1.0) / 2.0 * HISTOGRAM_BINS as f64) as usize;
        histogram[b.min(HISTOGRAM_BINS - 1)] += 1;
    }
    ProbeStats {
        pairs: n,
        mean,
        std: var.sqrt(),
        histogram,
    }
}

impl ProbeStats {
    /// `bin_lo,bin_hi,count` rows with a header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "bin_lo,bin_hi,count")?;
        let width = 2.0 / HISTOGRAM_BINS as f64;
        for (i, c) in self.histogram.iter().enumerate() {
            let lo = -1.0 + i as f64 * width;
            writeln!(w, "{lo:.3},{:.3},{c}", lo + width)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_orthogonal() {
        assert_eq!(cosine(&[0.6, 0.8], &[0.6, 0.8]), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn stats_and_histogram() {
        let users = vec![
            vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]],
        ];
        let s = similarity_probe(&users);
        // cosines: 1, 0, 0, -1, 0, 0
        assert_eq!(s.pairs, 6);
        assert_eq!(s.mean, 0.0);
        assert!((s.std - (2.0f64 / 6.0).sqrt()).abs() < 1e-15);
        assert_eq!(s.histogram.iter().sum::<usize>(), 6);
        assert_eq!(s.histogram[0], 1);
        assert_eq!(s.histogram[HISTOGRAM_BINS / 2], 4);
        assert_eq!(s.histogram[HISTOGRAM_BINS - 1], 1);
        let mut csv = Vec::new();
        s.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), HISTOGRAM_BINS + 1);
    }
}
