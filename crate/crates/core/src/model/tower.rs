//! Tape-level forward passes of the user tower, item tower and their parts.
//!
//! Every function takes a batch and returns tape variables so the same code
//! serves training (bound leaves) and inference (bound constants).

use crate::error::{Error, Result};
use crate::numerics::{AttentionLayout, Bound, Graph, MaskKind, Segment, Tensor, Var};

use super::config::{ModelConfig, Vocab};
use super::params::layer_prefix;
use super::types::{BehaviorEvent, ItemFeatures, UserInput, UserProfile};

/// Two-layer GeLU MLP under `prefix`.
pub fn mlp(g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = g.linear(x, b[&format!("{prefix}.w1")], b[&format!("{prefix}.b1")])?;
    let h = g.gelu(h);
    g.linear(h, b[&format!("{prefix}.w2")], b[&format!("{prefix}.b2")])
}

fn lookup(g: &mut Graph, b: &Bound, table: &str, ids: impl Iterator<Item = u32>, size: usize) -> Result<Var> {
    let rows: Vec<usize> = ids.map(|id| Vocab::row(id, size)).collect();
    g.gather_rows(b[table], &rows)
}

/// Behaviour tokens `[n, d]`: MLP over item embedding, watch ratio, the
/// three interaction flags and the author and tag embeddings.
pub fn encode_behaviors(g: &mut Graph, b: &Bound, cfg: &ModelConfig, events: &[BehaviorEvent]) -> Result<Var> {
    let v = &cfg.vocab;
    let item = lookup(g, b, "emb.item", events.iter().map(|e| e.item), v.items)?;
    let author = lookup(g, b, "emb.author", events.iter().map(|e| e.author), v.authors)?;
    let tag = lookup(g, b, "emb.tag", events.iter().map(|e| e.tag), v.tags)?;
    let flag = |f: bool| if f { 1.0 } else { 0.0 };
    let dense: Vec<f64> = events
        .iter()
        .flat_map(|e| [e.watch_ratio, flag(e.like), flag(e.comment), flag(e.share)])
        .collect();
    let dense = g.constant(Tensor::matrix(events.len(), 4, dense)?);
    let x = g.concat_cols(&[item, dense, author, tag])?;
    mlp(g, b, "behavior", x)
}

/// Gate features `E_u = [user_id embedding; device_id embedding]`, `[B, d]`.
pub fn id_features(g: &mut Graph, b: &Bound, cfg: &ModelConfig, profiles: &[UserProfile]) -> Result<Var> {
    let v = &cfg.vocab;
    let user = lookup(g, b, "emb.user_id", profiles.iter().map(|p| p.user_id), v.users)?;
    let device = lookup(g, b, "emb.device_id", profiles.iter().map(|p| p.device_id), v.devices)?;
    g.concat_cols(&[user, device])
}

/// The three pooled history views of one user window.
pub struct HistoryViews<'a> {
    pub rs: Vec<&'a BehaviorEvent>,
    pub click: Vec<&'a BehaviorEvent>,
    pub long_view: Vec<&'a BehaviorEvent>,
}

impl<'a> HistoryViews<'a> {
    /// Splits a window: every event, events with an interaction flag, and
    /// events watched at or above `long_view_threshold`.
    pub fn from_window(window: &'a [BehaviorEvent], long_view_threshold: f64) -> Self {
        HistoryViews {
            rs: window.iter().collect(),
            click: window.iter().filter(|e| e.interacted()).collect(),
            long_view: window.iter().filter(|e| e.watch_ratio >= long_view_threshold).collect(),
        }
    }
}

/// Objective tokens `O_k = MLP_k(U)`, one `[B, d]` variable per objective.
///
/// `U` concatenates the summed demographic embeddings with sum pools of
/// raw item embeddings over the three history views; the id embeddings join
/// only when `include_user_ids_in_query` is set.
pub fn build_query_tokens(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    profiles: &[UserProfile],
    views: &[HistoryViews<'_>],
    id_feats: Option<Var>,
) -> Result<Vec<Var>> {
    if profiles.len() != views.len() {
        return Err(Error::shape("build_query_tokens", "profiles and views differ in length"));
    }
    let v = &cfg.vocab;
    let age = lookup(g, b, "emb.age", profiles.iter().map(|p| p.age), v.ages)?;
    let gender = lookup(g, b, "emb.gender", profiles.iter().map(|p| p.gender), v.genders)?;
    let region = lookup(g, b, "emb.region", profiles.iter().map(|p| p.region), v.regions)?;
    let u = g.add(age, gender)?;
    let u = g.add(u, region)?;

    let rows = |seq: &[&BehaviorEvent]| seq.iter().map(|e| Vocab::row(e.item, v.items)).collect::<Vec<_>>();
    let rs = g.pool_rows(b["emb.item"], views.iter().map(|h| rows(&h.rs)).collect())?;
    let click = g.pool_rows(b["emb.item"], views.iter().map(|h| rows(&h.click)).collect())?;
    let long = g.pool_rows(b["emb.item"], views.iter().map(|h| rows(&h.long_view)).collect())?;

    // The optional ID block goes last so the other blocks keep their rows
    // of the query MLP weights whether or not it is present.
    let mut parts = vec![u, rs, click, long];
    if cfg.include_user_ids_in_query {
        let ids = match id_feats {
            Some(f) => f,
            None => id_features(g, b, cfg, profiles)?,
        };
        parts.push(ids);
    }
    let query = g.concat_cols(&parts)?;
    (0..cfg.k).map(|k| mlp(g, b, &format!("query.{k}"), query)).collect()
}

/// Gated mixture of expert FFNs. Returns the output and the gate scores
/// after top-`expert_cut` renormalisation.
pub fn pformer_ffn(g: &mut Graph, b: &Bound, cfg: &ModelConfig, prefix: &str, x: Var, e_u: Var) -> Result<(Var, Var)> {
    let fg = mlp(g, b, &format!("{prefix}.gate_ffn"), x)?;
    let gate_in = g.concat_cols(&[e_u, fg])?;
    let logits = g.linear(gate_in, b[&format!("{prefix}.gate.w")], b[&format!("{prefix}.gate.b")])?;
    let probs = g.softmax(logits, 1.0)?;
    let gate = g.top_k_renorm(probs, cfg.expert_cut)?;
    let mut out: Option<Var> = None;
    for e in 0..cfg.n_experts {
        let y = mlp(g, b, &format!("{prefix}.expert.{e}"), x)?;
        let s = g.select_col(gate, e)?;
        let y = g.mul_col(y, s)?;
        out = Some(match out {
            Some(acc) => g.add(acc, y)?,
            None => y,
        });
    }
    Ok((out.expect("n_experts >= 1"), gate))
}

/// Runs the decoder stack over packed sequences.
///
/// `tokens` holds every segment's rows; `e_u_rows` carries each row's gate
/// features. Each segment is `n_prefix` behaviour tokens followed by `K`
/// objective tokens.
pub fn decoder_forward(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    tokens: Var,
    segments: &[Segment],
    e_u_rows: Var,
) -> Result<Var> {
    for s in segments {
        if s.n_prefix > cfg.n_max {
            return Err(Error::invalid(format!(
                "sequence of {} events exceeds n_max = {}",
                s.n_prefix, cfg.n_max
            )));
        }
        if s.len != s.n_prefix + cfg.k {
            return Err(Error::shape("decoder_forward", "segment must end with K objective tokens"));
        }
    }
    let layout = AttentionLayout {
        segments: segments.to_vec(),
        heads: cfg.heads,
        mask: if cfg.isolate_objective_tokens {
            MaskKind::CausalIsolatedTail
        } else {
            MaskKind::Causal
        },
    };
    let mut h = tokens;
    for l in 1..=cfg.layers {
        let p = layer_prefix(l);
        let n1 = g.rmsnorm(h, b[&format!("{p}.attn_norm.gain")], cfg.rms_eps)?;
        let q = g.matmul(n1, b[&format!("{p}.attn.wq")])?;
        let k = g.matmul(n1, b[&format!("{p}.attn.wk")])?;
        let v = g.matmul(n1, b[&format!("{p}.attn.wv")])?;
        let a = g.attention(q, k, v, layout.clone())?;
        let h1 = g.add(h, a)?;
        let n2 = g.rmsnorm(h1, b[&format!("{p}.ffn_norm.gain")], cfg.rms_eps)?;
        let f = if l == cfg.pformer_layer {
            pformer_ffn(g, b, cfg, &p, n2, e_u_rows)?.0
        } else {
            mlp(g, b, &format!("{p}.ffn"), n2)?
        };
        h = g.add(h1, f)?;
    }
    Ok(h)
}

/// User-tower variables for a batch.
pub struct UserTowerVars {
    /// One `[B, d]` variable per objective.
    pub embeddings: Vec<Var>,
    /// Final hidden states of all packed rows.
    pub hidden: Var,
    pub segments: Vec<Segment>,
}

/// Full user tower over a batch. Histories are cut to their last `n_max`
/// events.
pub fn user_tower(g: &mut Graph, b: &Bound, cfg: &ModelConfig, inputs: &[UserInput]) -> Result<UserTowerVars> {
    if inputs.is_empty() {
        return Err(Error::invalid("user tower needs at least one input"));
    }
    let windows: Vec<&[BehaviorEvent]> = inputs.iter().map(|u| u.window(cfg.n_max)).collect();
    let profiles: Vec<UserProfile> = inputs.iter().map(|u| u.profile).collect();
    let views: Vec<HistoryViews> = windows
        .iter()
        .map(|w| HistoryViews::from_window(w, cfg.long_view_threshold))
        .collect();

    let e_u = id_features(g, b, cfg, &profiles)?;
    let objective_tokens = build_query_tokens(g, b, cfg, &profiles, &views, Some(e_u))?;

    let events: Vec<BehaviorEvent> = windows.iter().flat_map(|w| w.iter().copied()).collect();
    let mut sources = Vec::with_capacity(cfg.k + 1);
    let offset = if events.is_empty() {
        0
    } else {
        sources.push(encode_behaviors(g, b, cfg, &events)?);
        1
    };
    sources.extend(&objective_tokens);

    let mut index = Vec::new();
    let mut owners = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(inputs.len());
    let mut event_row = 0;
    for (u, w) in windows.iter().enumerate() {
        let start = index.len();
        for _ in 0..w.len() {
            index.push((0, event_row));
            event_row += 1;
        }
        for k in 0..cfg.k {
            index.push((offset + k, u));
        }
        let len = index.len() - start;
        owners.extend(std::iter::repeat(u).take(len));
        positions.extend(0..len);
        segments.push(Segment {
            start,
            len,
            n_prefix: w.len(),
        });
    }
    let mut tokens = g.assemble_rows(&sources, index)?;
    if cfg.positional_embedding {
        let pos = g.gather_rows(b["emb.position"], &positions)?;
        tokens = g.add(tokens, pos)?;
    }
    let e_u_rows = g.gather_rows(e_u, &owners)?;
    let hidden = decoder_forward(g, b, cfg, tokens, &segments, e_u_rows)?;

    let mut embeddings = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let rows: Vec<usize> = segments.iter().map(|s| s.start + s.n_prefix + k).collect();
        let h_k = g.gather_rows(hidden, &rows)?;
        let mut e = mlp(g, b, &format!("readout.{k}"), h_k)?;
        if cfg.normalize_outputs {
            e = g.l2_normalize_rows(e);
        }
        embeddings.push(e);
    }
    Ok(UserTowerVars {
        embeddings,
        hidden,
        segments,
    })
}

/// Shared item features `[M, 3d + 1]`: id, tag and author embeddings plus
/// popularity. Also the quota head's input.
pub fn item_features(g: &mut Graph, b: &Bound, cfg: &ModelConfig, items: &[ItemFeatures]) -> Result<Var> {
    let v = &cfg.vocab;
    let id = lookup(g, b, "emb.item", items.iter().map(|i| i.item), v.items)?;
    let tag = lookup(g, b, "emb.tag", items.iter().map(|i| i.tag), v.tags)?;
    let author = lookup(g, b, "emb.author", items.iter().map(|i| i.author), v.authors)?;
    let pop = g.constant(Tensor::matrix(items.len(), 1, items.iter().map(|i| i.popularity).collect())?);
    g.concat_cols(&[id, tag, author, pop])
}

/// Per-objective item embeddings from shared features, one `[M, d]`
/// variable per objective.
pub fn item_tower(g: &mut Graph, b: &Bound, cfg: &ModelConfig, features: Var) -> Result<Vec<Var>> {
    (0..cfg.k)
        .map(|k| {
            let prefix = if cfg.item_shared_mlp {
                "item.shared".to_string()
            } else {
                format!("item.{k}")
            };
            let e = mlp(g, b, &prefix, features)?;
            Ok(if cfg.normalize_outputs {
                g.l2_normalize_rows(e)
            } else {
                e
            })
        })
        .collect()
}
