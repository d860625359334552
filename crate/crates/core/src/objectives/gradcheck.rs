//! Finite-difference check of the full training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::model::{tower, BehaviorEvent, ItemFeatures, ModelConfig, MpFormer, UserInput, UserProfile, Vocab};
use crate::numerics::{grad_check, GradCheckReport, Graph, Tensor};

use super::{pair_scores, quota_objective, total_loss, TrainingBatch};

/// A model, a batch and the quota-loss weight to check gradients on.
#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub model: MpFormer,
    pub batch: TrainingBatch,
    pub lambda_quota: f64,
}

impl GradCheckCase {
    /// d = 8, n = 6, K = 3, 4 layers, 2 experts, batch of 4, with every
    /// parameter jittered away from its initial value (zero biases, unit
    /// gains and the zero quota output layer are special points).
    pub fn small(seed: u64) -> Result<Self> {
        let vocab = Vocab {
            items: 12,
            authors: 4,
            tags: 3,
            ages: 3,
            genders: 2,
            regions: 3,
            users: 6,
            devices: 6,
        };
        let config = ModelConfig {
            d: 8,
            n_max: 6,
            k: 3,
            layers: 4,
            n_experts: 2,
            ffn_hidden: 12,
            quota_hidden: 4,
            vocab: vocab.clone(),
            ..ModelConfig::default()
        };
        let mut model = MpFormer::new(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6ad_c4ec);
        let jitter = Normal::new(0.0, 0.1).expect("valid sigma");
        let names: Vec<String> = model.params.names().map(str::to_owned).collect();
        for name in names {
            let t = model.params.get_mut(&name).expect("listed name");
            for v in t.data_mut() {
                *v += jitter.sample(&mut rng);
            }
        }
        let item = |rng: &mut ChaCha8Rng| ItemFeatures {
            item: rng.random_range(0..vocab.items as u32),
            author: rng.random_range(0..vocab.authors as u32),
            tag: rng.random_range(0..vocab.tags as u32),
            popularity: rng.random(),
        };
        let mut batch = TrainingBatch {
            users: Vec::new(),
            items: Vec::new(),
            labels: Vec::new(),
            pscore: Vec::new(),
        };
        for i in 0..4 {
            let profile = UserProfile {
                age: rng.random_range(0..3),
                gender: rng.random_range(0..2),
                region: rng.random_range(0..3),
                user_id: rng.random_range(0..6),
                device_id: rng.random_range(0..6),
            };
            let n = rng.random_range(2..=6);
            let history = (0..n)
                .map(|t| {
                    let f = item(&mut rng);
                    BehaviorEvent {
                        item: f.item,
                        watch_ratio: rng.random(),
                        like: rng.random(),
                        comment: rng.random(),
                        share: rng.random(),
                        author: f.author,
                        tag: f.tag,
                        ts: t,
                    }
                })
                .collect();
            batch.users.push(UserInput::new(profile, history));
            batch.items.push(item(&mut rng));
            // Row i is positive for objective i (and row 3 for all), so
            // every objective has a loss term.
            batch.labels.push((0..3).map(|k| u8::from(k == i || i == 3 || rng.random_bool(0.3))).collect());
            batch.pscore.push(rng.random_range(-1.0..1.0));
        }
        Ok(GradCheckCase {
            model,
            batch,
            lambda_quota: 1.0,
        })
    }

    /// Checks every parameter against central differences of step `h`.
    ///
    /// The quota loss sees the shared item features and the paired scores
    /// only as constants, so the finite differences run on the objective
    /// with those inputs frozen at the base parameters; its gradient is the
    /// one training applies.
    pub fn run(&self, h: f64, tol: f64) -> Result<GradCheckReport> {
        let cfg = &self.model.config;
        let (features, scores) = self.quota_inputs()?;
        grad_check(
            &self.model.params,
            |g, b| {
                let user = tower::user_tower(g, b, cfg, &self.batch.users)?;
                let feats = tower::item_features(g, b, cfg, &self.batch.items)?;
                let items = tower::item_tower(g, b, cfg, feats)?;
                let (total, ..) = total_loss(g, &user.embeddings, &items, &self.batch.labels, cfg.tau, cfg.gamma)?;
                let frozen = g.constant(features.clone());
                let quota = quota_objective(g, b, frozen, &scores, &self.batch.pscore)?;
                let scaled = g.scale(quota, self.lambda_quota);
                g.add(total, scaled)
            },
            h,
            tol,
        )
    }

    /// Shared item features and paired scores at the base parameters.
    pub fn quota_inputs(&self) -> Result<(Tensor, Tensor)> {
        let cfg = &self.model.config;
        let mut g = Graph::new();
        let b = self.model.params.bind_frozen(&mut g);
        let user = tower::user_tower(&mut g, &b, cfg, &self.batch.users)?;
        let feats = tower::item_features(&mut g, &b, cfg, &self.batch.items)?;
        let items = tower::item_tower(&mut g, &b, cfg, feats)?;
        let scores = pair_scores(&g, &user.embeddings, &items)?;
        Ok((g.value(feats).clone(), scores))
    }
}
