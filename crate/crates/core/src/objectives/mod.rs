//! Multi-objective contrastive loss with shared in-batch negatives,
//! skew-adaptive objective weights, and the quota head with its regression
//! loss.

mod gradcheck;
mod optim;
mod train;

use crate::error::{Error, Result};
use crate::model::tower;
use crate::model::{ItemFeatures, ModelConfig};
use crate::numerics::{Bound, Graph, Tensor, Var};

pub use gradcheck::GradCheckCase;
pub use optim::{Adam, AdamConfig};
pub use train::{StepRecord, TrainConfig, Trainer, TrainingBatch};

/// Contrastive loss of one objective.
///
/// Row `i` scores its own item against all `N` batch items; only rows with
/// `labels[i] == 1` contribute and the sum is divided by their count. With
/// no positive row the loss is a constant zero and `positives` is 0.
pub fn infonce_loss(g: &mut Graph, users: Var, items: Var, labels: &[u8], tau: f64) -> Result<InfoNce> {
    let n = g.value(users).rows();
    if n < 2 || g.value(items).rows() != n || labels.len() != n {
        return Err(Error::shape("infonce_loss", "need N >= 2 matching users, items and labels"));
    }
    let logits = {
        let vt = g.transpose(items)?;
        g.matmul(users, vt)?
    };
    infonce_from_logits(g, logits, labels, tau)
}

/// [`infonce_loss`] on precomputed similarities `[N, N]`.
pub fn infonce_from_logits(g: &mut Graph, logits: Var, labels: &[u8], tau: f64) -> Result<InfoNce> {
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok(InfoNce {
            loss: zero,
            positives: 0,
        });
    }
    let logp = g.log_softmax(logits, tau)?;
    let diag = g.diag(logp)?;
    let w = labels
        .iter()
        .map(|&l| -(l as f64) / positives as f64)
        .collect();
    Ok(InfoNce {
        loss: g.weighted_sum(diag, w)?,
        positives,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct InfoNce {
    pub loss: Var,
    /// Rows positive for the objective; zero means the objective was absent.
    pub positives: usize,
}

/// `alpha_k = log(1 + gamma / c_k) / sum_j log(1 + gamma / c_j)`.
pub fn alpha_weights(counts: &[usize], gamma: f64) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::invalid("no objectives"));
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("objective {k} has no positives")));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid("gamma must be positive"));
    }
    if counts.iter().all(|&c| c == counts[0]) {
        return Ok(vec![1.0 / counts.len() as f64; counts.len()]);
    }
    let raw: Vec<f64> = counts.iter().map(|&c| (gamma / c as f64).ln_1p()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|r| r / total).collect())
}

/// Per-batch loss values.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub per_objective: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `sum_k alpha_k L_k`.
    pub total: f64,
    pub quota: f64,
    /// Objectives with no positive row in the batch.
    pub absent: Vec<bool>,
}

/// Tape variables of a full forward pass over a batch.
pub struct BatchLoss {
    /// `total + lambda_q * quota`, the optimised scalar.
    pub objective: Var,
    pub total: Var,
    pub per_objective: Vec<Var>,
    pub quota: Var,
    pub alpha: Vec<f64>,
    pub absent: Vec<bool>,
}

impl BatchLoss {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            per_objective: self.per_objective.iter().map(|&v| g.scalar(v)).collect(),
            alpha: self.alpha.clone(),
            total: g.scalar(self.total),
            quota: g.scalar(self.quota),
            absent: self.absent.clone(),
        }
    }
}

/// `sum_k alpha_k L_k` with alpha from this batch's positive counts.
///
/// Objectives without positives keep a zero loss and enter the weights with
/// count one.
pub fn total_loss(
    g: &mut Graph,
    users: &[Var],
    items: &[Var],
    labels: &[Vec<u8>],
    tau: f64,
    gamma: f64,
) -> Result<(Var, Vec<Var>, Vec<f64>, Vec<bool>)> {
    let k = users.len();
    if items.len() != k || k == 0 {
        return Err(Error::shape("total_loss", "need K user and K item embeddings"));
    }
    let mut losses = Vec::with_capacity(k);
    let mut counts = Vec::with_capacity(k);
    for j in 0..k {
        let col: Vec<u8> = labels.iter().map(|l| l[j]).collect();
        let r = infonce_loss(g, users[j], items[j], &col, tau)?;
        losses.push(r.loss);
        counts.push(r.positives);
    }
    let absent: Vec<bool> = counts.iter().map(|&c| c == 0).collect();
    if absent.iter().any(|&a| a) {
        log::warn!("objectives without positives in batch: {absent:?}");
    }
    let alpha = alpha_weights(&counts.iter().map(|&c| c.max(1)).collect::<Vec<_>>(), gamma)?;
    let mut total = g.scale(losses[0], alpha[0]);
    for (&l, &a) in losses.iter().zip(&alpha).skip(1) {
        let term = g.scale(l, a);
        total = g.add(total, term)?;
    }
    Ok((total, losses, alpha, absent))
}

/// Quota weights `[M, K]`: softmax of a two-layer MLP over shared item
/// features. The features are detached so only the head learns from them.
pub fn quota_forward(g: &mut Graph, b: &Bound, features: Var) -> Result<Var> {
    let x = g.detach(features);
    let logits = tower::mlp(g, b, "quota", x)?;
    g.softmax(logits, 1.0)
}

/// Mean of `(pscore_i - sum_k w_ik s_ik)^2` over positive pairs.
///
/// `scores` holds `s_k(u_i, i)` as plain values, so no gradient reaches the
/// towers. An empty set yields zero.
pub fn quota_loss(g: &mut Graph, weights: Var, scores: &Tensor, pscore: &[f64]) -> Result<Var> {
    let n = pscore.len();
    if n == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    if g.value(weights).shape() != scores.shape() || scores.rows() != n {
        return Err(Error::shape("quota_loss", "weights, scores and pscore disagree"));
    }
    let k = scores.cols();
    let s = g.constant(scores.clone());
    let ws = g.mul(weights, s)?;
    let ones = g.constant(Tensor::full(&[k, 1], 1.0));
    let pred = g.matmul(ws, ones)?;
    let target = g.constant(Tensor::matrix(n, 1, pscore.to_vec())?);
    let r = g.sub(target, pred)?;
    let sq = g.square(r);
    let sum = g.sum(sq);
    Ok(g.scale(sum, 1.0 / n as f64))
}

/// Full forward and loss over one batch on an existing graph.
pub fn batch_loss(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    batch: &TrainingBatch,
    lambda_quota: f64,
) -> Result<BatchLoss> {
    if batch.len() < 2 {
        return Err(Error::invalid("a batch needs at least 2 rows"));
    }
    if batch.labels.iter().any(|l| l.len() != cfg.k) {
        return Err(Error::shape("batch_loss", format!("labels must have K = {} entries", cfg.k)));
    }
    let user = tower::user_tower(g, b, cfg, &batch.users)?;
    let feats = tower::item_features(g, b, cfg, &batch.items)?;
    let items = tower::item_tower(g, b, cfg, feats)?;
    let (total, per_objective, alpha, absent) =
        total_loss(g, &user.embeddings, &items, &batch.labels, cfg.tau, cfg.gamma)?;

    let scores = pair_scores(g, &user.embeddings, &items)?;
    let quota = quota_objective(g, b, feats, &scores, &batch.pscore)?;
    let scaled = g.scale(quota, lambda_quota);
    let objective = g.add(total, scaled)?;
    Ok(BatchLoss {
        objective,
        total,
        per_objective,
        quota,
        alpha,
        absent,
    })
}

/// `[N, K]` values of `s_k(u_i, i)`, the paired user/item scores.
pub fn pair_scores(g: &Graph, users: &[Var], items: &[Var]) -> Result<Tensor> {
    let k = users.len();
    let n = users.first().map_or(0, |&u| g.value(u).rows());
    let mut scores = Vec::with_capacity(n * k);
    for i in 0..n {
        for (&u, &v) in users.iter().zip(items) {
            scores.push(crate::numerics::kernels::dot(g.value(u).row(i), g.value(v).row(i)));
        }
    }
    Tensor::matrix(n, k, scores)
}

/// Quota head forward plus its regression loss.
pub fn quota_objective(g: &mut Graph, b: &Bound, features: Var, scores: &Tensor, pscore: &[f64]) -> Result<Var> {
    let w = quota_forward(g, b, features)?;
    quota_loss(g, w, scores, pscore)
}

/// Quota weights for items, one K-simplex per item.
pub fn quota_weights(model: &crate::model::MpFormer, items: &[ItemFeatures]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let b = model.params.bind_frozen(&mut g);
    let f = tower::item_features(&mut g, &b, &model.config, items)?;
    let w = quota_forward(&mut g, &b, f)?;
    let t = g.value(w);
    Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
}

#[cfg(test)]
mod tests;
