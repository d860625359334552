use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vocabulary sizes of the categorical inputs. Each table gets one extra
/// row reserved for out-of-vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Vocab {
    pub items: usize,
    pub authors: usize,
    pub tags: usize,
    pub ages: usize,
    pub genders: usize,
    pub regions: usize,
    pub users: usize,
    pub devices: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab {
            items: 2000,
            authors: 200,
            tags: 20,
            ages: 8,
            genders: 3,
            regions: 16,
            users: 500,
            devices: 500,
        }
    }
}

impl Vocab {
    /// Table row for `id`: row 0 is the out-of-vocabulary slot.
    #[inline]
    pub fn row(id: u32, size: usize) -> usize {
        if (id as usize) < size {
            id as usize + 1
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Longest behaviour history fed to the decoder.
    pub n_max: usize,
    /// Number of objectives.
    pub k: usize,
    pub layers: usize,
    /// 1-based index of the gated-expert layer.
    pub pformer_layer: usize,
    pub n_experts: usize,
    pub expert_cut: usize,
    pub ffn_hidden: usize,
    pub heads: usize,
    pub include_user_ids_in_query: bool,
    /// Softmax temperature of the contrastive loss.
    pub tau: f64,
    /// Rebalancing intensity of the objective weights.
    pub gamma: f64,
    /// Unit-normalise tower outputs.
    pub normalize_outputs: bool,
    /// Hide objective tokens from each other in attention.
    pub isolate_objective_tokens: bool,
    pub positional_embedding: bool,
    /// One item MLP shared by all objectives (ablation).
    pub item_shared_mlp: bool,
    pub quota_hidden: usize,
    /// Watch ratio at or above which a history event joins the long-view pool.
    pub long_view_threshold: f64,
    pub rms_eps: f64,
    pub vocab: Vocab,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            n_max: 32,
            k: 3,
            layers: 4,
            pformer_layer: 3,
            n_experts: 4,
            expert_cut: 2,
            ffn_hidden: 128,
            heads: 1,
            include_user_ids_in_query: false,
            tau: 0.1,
            gamma: 1000.0,
            normalize_outputs: true,
            isolate_objective_tokens: false,
            positional_embedding: false,
            item_shared_mlp: false,
            quota_hidden: 16,
            long_view_threshold: 0.7,
            rms_eps: 1e-6,
            vocab: Vocab::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("n_max", self.n_max),
            ("k", self.k),
            ("layers", self.layers),
            ("n_experts", self.n_experts),
            ("ffn_hidden", self.ffn_hidden),
            ("heads", self.heads),
            ("quota_hidden", self.quota_hidden),
        ];
        for (field, v) in positive {
            if v < 1 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.d < 2 {
            return Err(Error::config("d", "must be at least 2"));
        }
        if !(1..=self.layers).contains(&self.pformer_layer) {
            return Err(Error::config("pformer_layer", format!("must lie in 1..={}", self.layers)));
        }
        if !(1..=self.n_experts).contains(&self.expert_cut) {
            return Err(Error::config("expert_cut", format!("must lie in 1..={}", self.n_experts)));
        }
        if self.d % self.heads != 0 {
            return Err(Error::config("heads", format!("must divide d = {}", self.d)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", "must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", "must be positive"));
        }
        if !(self.rms_eps > 0.0) {
            return Err(Error::config("rms_eps", "must be positive"));
        }
        Ok(())
    }

    /// Width of each of the two id embeddings that form the gate's user
    /// vector; together they span `d`.
    pub(crate) fn id_widths(&self) -> (usize, usize) {
        let user = self.d / 2;
        (user, self.d - user)
    }

    /// Width of the concatenated query input.
    pub(crate) fn query_width(&self) -> usize {
        if self.include_user_ids_in_query {
            5 * self.d
        } else {
            4 * self.d
        }
    }

    /// Width of a behaviour event's input: item, author and tag embeddings
    /// plus watch ratio and three interaction flags.
    pub(crate) fn behavior_width(&self) -> usize {
        3 * self.d + 4
    }

    /// Width of the item tower's shared feature vector: id, tag and author
    /// embeddings plus popularity.
    pub(crate) fn item_feature_width(&self) -> usize {
        3 * self.d + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn invariants_are_enforced() {
        let bad = [
            ModelConfig { pformer_layer: 5, ..ModelConfig::default() },
            ModelConfig { pformer_layer: 0, ..ModelConfig::default() },
            ModelConfig { expert_cut: 5, ..ModelConfig::default() },
            ModelConfig { k: 0, ..ModelConfig::default() },
            ModelConfig { heads: 3, ..ModelConfig::default() },
            ModelConfig { tau: 0.0, ..ModelConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        ModelConfig { heads: 4, ..ModelConfig::default() }.validate().unwrap();
    }

    #[test]
    fn oov_ids_share_row_zero() {
        assert_eq!(Vocab::row(0, 10), 1);
        assert_eq!(Vocab::row(9, 10), 10);
        assert_eq!(Vocab::row(10, 10), 0);
        assert_eq!(Vocab::row(999, 10), 0);
    }
}
