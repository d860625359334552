use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tests_support::{random_event, random_input, tiny_config};
use super::tower::{self, HistoryViews};
use super::*;
use crate::numerics::{Graph, Segment, Tensor};

fn item(id: u32) -> ItemFeatures {
    ItemFeatures {
        item: id,
        author: id % 5,
        tag: id % 4,
        popularity: 0.1 * (id % 7) as f64,
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn towers_emit_k_unit_vectors() {
    let m = MpFormer::new(tiny_config(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let inputs: Vec<UserInput> = (0..5).map(|i| random_input(&mut rng, i * 2)).collect();
    for out in m.user_embeddings(&inputs).unwrap() {
        assert_eq!(out.embeddings.len(), 3);
        for e in &out.embeddings {
            assert_eq!(e.len(), 8);
            assert!((norm(e) - 1.0).abs() < 1e-6);
        }
    }
    let items: Vec<ItemFeatures> = (0..40).map(item).collect();
    for out in m.item_embeddings(&items).unwrap() {
        assert_eq!(out.embeddings.len(), 3);
        for e in &out.embeddings {
            assert!((norm(e) - 1.0).abs() < 1e-6);
        }
    }
}

/// Runs the decoder over random packed tokens and returns the hidden rows.
fn decoder_rows(cfg: &ModelConfig, seed: u64, lens: &[usize], bump: Option<(usize, f64)>) -> Tensor {
    let params = init_params(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 99);
    let mut segments = Vec::new();
    let mut start = 0;
    for &n in lens {
        segments.push(Segment {
            start,
            len: n + cfg.k,
            n_prefix: n,
        });
        start += n + cfg.k;
    }
    let rows = start;
    let mut data: Vec<f64> = (0..rows * cfg.d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let users: Vec<f64> = (0..rows * cfg.d).map(|_| rng.random_range(-1.0..1.0)).collect();
    if let Some((row, delta)) = bump {
        for v in &mut data[row * cfg.d..(row + 1) * cfg.d] {
            *v += delta;
        }
    }
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let tokens = g.constant(Tensor::matrix(rows, cfg.d, data).unwrap());
    let eu = g.constant(Tensor::matrix(rows, cfg.d, users).unwrap());
    let h = tower::decoder_forward(&mut g, &b, cfg, tokens, &segments, eu).unwrap();
    g.value(h).clone()
}

#[test]
fn decoder_is_causal_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let heads = [1, 2, 4][trial % 3];
        let cfg = ModelConfig {
            heads,
            k: rng.random_range(1..4),
            ..tiny_config()
        };
        let lens: Vec<usize> = (0..3).map(|_| rng.random_range(0..=cfg.n_max)).collect();
        let seg_len = lens[1] + cfg.k;
        let seg_start = lens[0] + cfg.k;
        let j = rng.random_range(0..seg_len);
        let base = decoder_rows(&cfg, trial as u64, &lens, None);
        let bumped = decoder_rows(&cfg, trial as u64, &lens, Some((seg_start + j, 1e-3)));
        let d = cfg.d;
        // Earlier positions of the same segment and every other segment are untouched.
        for r in 0..base.rows() {
            let in_seg = (seg_start..seg_start + seg_len).contains(&r);
            if !in_seg || r < seg_start + j {
                assert_eq!(base.row(r), bumped.row(r), "trial {trial} row {r}");
            }
        }
        assert_ne!(&base.data()[(seg_start + j) * d..], &bumped.data()[(seg_start + j) * d..]);
    }
}

#[test]
fn isolated_objective_tokens_do_not_see_each_other() {
    let cfg = ModelConfig {
        isolate_objective_tokens: true,
        ..tiny_config()
    };
    let n = 4;
    let base = decoder_rows(&cfg, 2, &[n], None);
    let bumped = decoder_rows(&cfg, 2, &[n], Some((n, 1e-3)));
    assert_ne!(base.row(n), bumped.row(n));
    assert_eq!(base.row(n + 1), bumped.row(n + 1));
    assert_eq!(base.row(n + 2), bumped.row(n + 2));

    // Under the plain causal mask O_2 does see O_1.
    let base = decoder_rows(&tiny_config(), 2, &[n], None);
    let bumped = decoder_rows(&tiny_config(), 2, &[n], Some((n, 1e-3)));
    assert_ne!(base.row(n + 1), bumped.row(n + 1));
}

#[test]
fn decoder_rejects_long_sequences() {
    let cfg = tiny_config();
    let params = init_params(&cfg, 0);
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let rows = cfg.n_max + 1 + cfg.k;
    let t = g.constant(Tensor::zeros(&[rows, cfg.d]));
    let seg = [Segment {
        start: 0,
        len: rows,
        n_prefix: cfg.n_max + 1,
    }];
    assert!(tower::decoder_forward(&mut g, &b, &cfg, t, &seg, t).is_err());
}

fn gate_run(cfg: &ModelConfig, seed: u64) -> (Tensor, Tensor, Vec<Tensor>) {
    let params = init_params(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = 7;
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let x = g.constant(Tensor::matrix(rows, cfg.d, (0..rows * cfg.d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap());
    let eu = g.constant(Tensor::matrix(rows, cfg.d, (0..rows * cfg.d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap());
    let p = "layer.3";
    let (out, gate) = tower::pformer_ffn(&mut g, &b, cfg, p, x, eu).unwrap();
    let experts = (0..cfg.n_experts)
        .map(|e| {
            let y = tower::mlp(&mut g, &b, &format!("{p}.expert.{e}"), x).unwrap();
            g.value(y).clone()
        })
        .collect();
    (g.value(out).clone(), g.value(gate).clone(), experts)
}

#[test]
fn gate_scores_form_a_sparse_simplex() {
    let cfg = tiny_config();
    let (_, gate, _) = gate_run(&cfg, 3);
    for r in 0..gate.rows() {
        let row = gate.row(r);
        assert!(row.iter().all(|&s| s >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(row.iter().filter(|&&s| s > 0.0).count(), cfg.expert_cut);
    }
}

#[test]
fn single_expert_and_top_one_reduce_to_one_ffn() {
    let cfg = ModelConfig {
        n_experts: 1,
        expert_cut: 1,
        ..tiny_config()
    };
    let (out, _, experts) = gate_run(&cfg, 4);
    assert_eq!(out, experts[0]);

    let cfg = ModelConfig {
        expert_cut: 1,
        ..tiny_config()
    };
    let (out, gate, experts) = gate_run(&cfg, 4);
    for r in 0..out.rows() {
        let e = gate.row(r).iter().position(|&s| s == 1.0).unwrap();
        assert_eq!(out.row(r), experts[e].row(r));
    }

    let cfg = ModelConfig {
        expert_cut: 4,
        ..tiny_config()
    };
    let (_, gate, _) = gate_run(&cfg, 4);
    assert!(gate.data().iter().all(|&s| s > 0.0));
}

#[test]
fn user_id_reaches_output_only_through_the_gate() {
    let cfg = tiny_config();
    let mut m = MpFormer::new(cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_input(&mut rng, 4);
    let mut b = a.clone();
    b.profile.user_id = (a.profile.user_id + 1) % 10;
    let ea = m.user_embeddings(&[a.clone()]).unwrap();
    let eb = m.user_embeddings(&[b.clone()]).unwrap();
    assert_ne!(ea, eb, "the gate sees user ids");

    for name in ["emb.user_id", "emb.device_id"] {
        let t = m.params.get_mut(name).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    assert_eq!(m.user_embeddings(&[a]).unwrap(), m.user_embeddings(&[b]).unwrap());
}

#[test]
fn query_tokens_ignore_ids_unless_enabled() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = random_input(&mut rng, 5);
    let mut other = input.profile;
    other.user_id = (other.user_id + 3) % 10;
    other.device_id = (other.device_id + 1) % 10;
    for flag in [false, true] {
        let cfg = ModelConfig {
            include_user_ids_in_query: flag,
            ..tiny_config()
        };
        let params = init_params(&cfg, 0);
        let run = |p: UserProfile| {
            let mut g = Graph::new();
            let b = params.bind_frozen(&mut g);
            let views = [HistoryViews::from_window(&input.history, cfg.long_view_threshold)];
            let toks = tower::build_query_tokens(&mut g, &b, &cfg, &[p], &views, None).unwrap();
            toks.iter().map(|&t| g.value(t).clone()).collect::<Vec<_>>()
        };
        assert_eq!(run(input.profile) == run(other), !flag);
    }
}

#[test]
fn empty_history_gives_finite_tokens() {
    let cfg = tiny_config();
    let params = init_params(&cfg, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = random_input(&mut rng, 0);
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let views = [HistoryViews::from_window(&[], cfg.long_view_threshold)];
    let toks = tower::build_query_tokens(&mut g, &b, &cfg, &[input.profile], &views, None).unwrap();
    assert_eq!(toks.len(), cfg.k);
    assert!(toks.iter().all(|&t| g.value(t).is_finite()));
    let m = MpFormer::from_params(cfg, params).unwrap();
    let out = m.user_embeddings(&[input]).unwrap();
    assert!(out[0].embeddings.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn sum_pool_counts_duplicates() {
    let cfg = tiny_config();
    let params = init_params(&cfg, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let e = random_event(&mut rng, 0);
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let row = Vocab::row(e.item, cfg.vocab.items);
    let pooled = g.pool_rows(b["emb.item"], vec![vec![row], vec![row, row]]).unwrap();
    let p = g.value(pooled);
    for (one, two) in p.row(0).iter().zip(p.row(1)) {
        assert_eq!(2.0 * one, *two);
    }
}

#[test]
fn behaviour_encoder_is_deterministic_and_feature_sensitive() {
    let cfg = tiny_config();
    let params = init_params(&cfg, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let e = random_event(&mut rng, 0);
    let mut changed = e;
    changed.watch_ratio = (e.watch_ratio + 0.37) % 1.0;
    let mut oov_a = e;
    oov_a.item = 30;
    let mut oov_b = e;
    oov_b.item = 12345;
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let t = tower::encode_behaviors(&mut g, &b, &cfg, &[e, e, changed, oov_a, oov_b]).unwrap();
    let t = g.value(t);
    assert_eq!(t.row(0), t.row(1));
    assert_ne!(t.row(0), t.row(2));
    assert_eq!(t.row(3), t.row(4));
}

#[test]
fn history_is_cut_to_the_last_n_max_events() {
    let cfg = tiny_config();
    let m = MpFormer::new(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let long = random_input(&mut rng, 15);
    let short = UserInput::new(long.profile, long.window(cfg.n_max).to_vec());
    assert_eq!(m.user_embeddings(&[long]).unwrap(), m.user_embeddings(&[short]).unwrap());
}

#[test]
fn batching_does_not_change_outputs() {
    let m = MpFormer::new(tiny_config(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs: Vec<UserInput> = (0..300).map(|i| random_input(&mut rng, i % 7)).collect();
    let batched = m.user_embeddings(&inputs).unwrap();
    for i in [0, 1, 150, 299] {
        assert_eq!(batched[i], m.user_embeddings(&inputs[i..=i]).unwrap()[0]);
    }
}

#[test]
fn shared_item_mlp_gives_identical_objectives() {
    let cfg = ModelConfig {
        item_shared_mlp: true,
        ..tiny_config()
    };
    let m = MpFormer::new(cfg, 9).unwrap();
    let out = m.item_embeddings(&[item(3), item(3), item(40)]).unwrap();
    assert_eq!(out[0], out[1]);
    for o in &out {
        assert_eq!(o.embeddings[0], o.embeddings[1]);
        assert_eq!(o.embeddings[1], o.embeddings[2]);
    }
    let m = MpFormer::new(tiny_config(), 9).unwrap();
    let out = m.item_embeddings(&[item(3)]).unwrap();
    assert_ne!(out[0].embeddings[0], out[0].embeddings[1]);
}

#[test]
fn swapping_objective_blocks_swaps_outputs() {
    let cfg = ModelConfig {
        k: 2,
        isolate_objective_tokens: true,
        ..tiny_config()
    };
    let m = MpFormer::new(cfg.clone(), 10).unwrap();
    let mut swapped = m.clone();
    for stem in ["query", "readout"] {
        for p in ["w1", "b1", "w2", "b2"] {
            let a = m.params.get(&format!("{stem}.0.{p}")).unwrap().clone();
            let b = m.params.get(&format!("{stem}.1.{p}")).unwrap().clone();
            swapped.params.insert(format!("{stem}.0.{p}"), b);
            swapped.params.insert(format!("{stem}.1.{p}"), a);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let input = random_input(&mut rng, 3);
    let a = m.user_embeddings(&[input.clone()]).unwrap();
    let b = swapped.user_embeddings(&[input]).unwrap();
    // With mutually masked objective tokens and no positional signal the
    // two token positions are exchangeable.
    for (x, y) in a[0].embeddings[0].iter().zip(&b[0].embeddings[1]) {
        assert!((x - y).abs() < 1e-12);
    }
    for (x, y) in a[0].embeddings[1].iter().zip(&b[0].embeddings[0]) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn from_params_checks_shapes() {
    let cfg = tiny_config();
    let mut p = init_params(&cfg, 0);
    p.insert("layer.1.attn.wq", Tensor::zeros(&[3, 3]));
    assert!(MpFormer::from_params(cfg.clone(), p).is_err());
    let mut p = init_params(&cfg, 0);
    p.insert("extra", Tensor::zeros(&[1]));
    assert!(MpFormer::from_params(cfg, p).is_err());
}
