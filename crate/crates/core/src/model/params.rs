//! Parameter naming and initialisation.
//!
//! Names are stable across versions because checkpoints key on them. The
//! attention projections exist once per layer; there is no per-objective
//! copy anywhere in the decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::numerics::{ParamStore, Tensor};

use super::config::ModelConfig;

pub(crate) fn layer_prefix(l: usize) -> String {
    format!("layer.{l}")
}

struct Init {
    seed: u64,
    store: ParamStore,
}

/// Each tensor draws from its own stream keyed by `(seed, name)`, so a
/// tensor's values do not depend on which other tensors a config creates.
fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

impl Init {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) {
        let n = Normal::new(0.0, std).expect("finite std");
        let mut rng = tensor_rng(self.seed, &name);
        let data = (0..rows * cols).map(|_| n.sample(&mut rng)).collect();
        self.store.insert(name, Tensor::matrix(rows, cols, data).expect("sized"));
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) {
        self.store.insert(name, Tensor::zeros(&[rows, cols]));
    }

    fn ones(&mut self, name: String, cols: usize) {
        self.store.insert(name, Tensor::full(&[1, cols], 1.0));
    }

    fn embedding(&mut self, name: &str, vocab: usize, d: usize) {
        self.normal(name.to_string(), vocab + 1, d, 0.1);
    }

    fn linear(&mut self, prefix: &str, suffix: &str, fan_in: usize, fan_out: usize) {
        self.normal(format!("{prefix}.w{suffix}"), fan_in, fan_out, 1.0 / (fan_in as f64).sqrt());
        self.zeros(format!("{prefix}.b{suffix}"), 1, fan_out);
    }

    /// Two-layer GeLU MLP: `w1 [fan_in, hidden]`, `w2 [hidden, fan_out]`.
    fn mlp(&mut self, prefix: &str, fan_in: usize, hidden: usize, fan_out: usize) {
        self.linear(prefix, "1", fan_in, hidden);
        self.linear(prefix, "2", hidden, fan_out);
    }
}

/// Fresh parameters for `cfg`, deterministic in `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let d = cfg.d;
    let v = &cfg.vocab;
    let mut it = Init {
        seed,
        store: ParamStore::new(),
    };

    // Item-side tables are shared by the behaviour encoder, the history
    // pools and the item tower.
    it.embedding("emb.item", v.items, d);
    it.embedding("emb.author", v.authors, d);
    it.embedding("emb.tag", v.tags, d);
    it.embedding("emb.age", v.ages, d);
    it.embedding("emb.gender", v.genders, d);
    it.embedding("emb.region", v.regions, d);
    let (wu, wd) = cfg.id_widths();
    it.embedding("emb.user_id", v.users, wu);
    it.embedding("emb.device_id", v.devices, wd);
    if cfg.positional_embedding {
        it.normal("emb.position".into(), cfg.n_max + cfg.k, d, 0.1);
    }

    it.mlp("behavior", cfg.behavior_width(), d, d);
    for k in 0..cfg.k {
        it.mlp(&format!("query.{k}"), cfg.query_width(), d, d);
        it.mlp(&format!("readout.{k}"), d, d, d);
    }

    for l in 1..=cfg.layers {
        let p = layer_prefix(l);
        it.ones(format!("{p}.attn_norm.gain"), d);
        for w in ["wq", "wk", "wv"] {
            it.normal(format!("{p}.attn.{w}"), d, d, 1.0 / (d as f64).sqrt());
        }
        it.ones(format!("{p}.ffn_norm.gain"), d);
        if l == cfg.pformer_layer {
            it.mlp(&format!("{p}.gate_ffn"), d, cfg.ffn_hidden, d);
            it.linear(&format!("{p}.gate"), "", 2 * d, cfg.n_experts);
            for e in 0..cfg.n_experts {
                it.mlp(&format!("{p}.expert.{e}"), d, cfg.ffn_hidden, d);
            }
        } else {
            it.mlp(&format!("{p}.ffn"), d, cfg.ffn_hidden, d);
        }
    }

    let fw = cfg.item_feature_width();
    if cfg.item_shared_mlp {
        it.mlp("item.shared", fw, d, d);
    } else {
        for k in 0..cfg.k {
            it.mlp(&format!("item.{k}"), fw, d, d);
        }
    }

    it.linear("quota", "1", fw, cfg.quota_hidden);
    // A zero output layer starts every item at uniform weights.
    it.zeros("quota.w2".into(), cfg.quota_hidden, cfg.k);
    it.zeros("quota.b2".into(), 1, cfg.k);

    it.store
}

/// True for parameters trained only by the quota loss.
pub fn is_quota_param(name: &str) -> bool {
    name.starts_with("quota.")
}
