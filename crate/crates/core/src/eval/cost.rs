//! Operation counts of the attention projection block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModelInput {
    /// History length.
    pub n: u64,
    pub d: u64,
    pub k: u64,
    /// Decoder layers; the per-layer count is multiplied by this.
    pub layers: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QkvMode {
    /// One decoder pass per objective over `n + 1` tokens.
    Independent,
    /// One pass over `n + K` tokens with shared projections.
    Shared,
}

impl CostModelInput {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("n", self.n), ("d", self.d), ("k", self.k), ("layers", self.layers)] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }
}

fn block(len: u128, d: u128) -> u128 {
    len * d * d + len * len * d
}

/// `K((n+1)d² + (n+1)²d)` independent, `(n+K)d² + (n+K)²d` shared, times
/// the layer count.
pub fn qkv_cost(inp: CostModelInput, mode: QkvMode) -> u128 {
    let (n, d, k, l) = (inp.n as u128, inp.d as u128, inp.k as u128, inp.layers as u128);
    let per_layer = match mode {
        QkvMode::Independent => k * block(n + 1, d),
        QkvMode::Shared => block(n + k, d),
    };
    l * per_layer
}

/// Rows of `(K, independent, shared)` for `k` in `ks`.
pub fn cost_table(n: u64, d: u64, layers: u64, ks: &[u64]) -> Vec<(u64, u128, u128)> {
    ks.iter()
        .map(|&k| {
            let inp = CostModelInput { n, d, k, layers };
            (k, qkv_cost(inp, QkvMode::Independent), qkv_cost(inp, QkvMode::Shared))
        })
        .collect()
}
