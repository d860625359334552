use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{init_params, is_quota_param, MpFormer};
use crate::numerics::Graph;

fn loss_of(logits: Vec<f64>, n: usize, labels: &[u8], tau: f64) -> f64 {
    let mut g = Graph::new();
    let l = g.constant(Tensor::matrix(n, n, logits).unwrap());
    let r = infonce_from_logits(&mut g, l, labels, tau).unwrap();
    g.scalar(r.loss)
}

#[test]
fn uniform_logits_give_log_n() {
    for n in [2, 5, 16] {
        let v = loss_of(vec![0.3; n * n], n, &{
            let mut l = vec![0; n];
            l[0] = 1;
            l
        }, 0.1);
        assert!((v - (n as f64).ln()).abs() < 1e-9);
    }
}

#[test]
fn two_row_closed_form() {
    // <u1,v1> = 1, <u1,v2> = 0, only row 1 positive.
    let logits = vec![1.0, 0.0, 0.7, -0.2];
    // ln(1 + e^-1) and ln(1 + e^-2)
    assert!((loss_of(logits.clone(), 2, &[1, 0], 1.0) - 0.313_261_687_518_222_9).abs() < 1e-9);
    assert!((loss_of(logits, 2, &[1, 0], 0.5) - 0.126_928_011_042_972_6).abs() < 1e-9);
}

#[test]
fn row_shift_and_negative_permutation_leave_loss_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 6;
    let logits: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = [1, 0, 1, 1, 0, 1];
    let base = loss_of(logits.clone(), n, &labels, 0.2);

    let mut shifted = logits.clone();
    for v in &mut shifted[2 * n..3 * n] {
        *v += 4.0;
    }
    assert!((loss_of(shifted, n, &labels, 0.2) - base).abs() < 1e-12);

    // Swap two negative columns within every row, keeping each diagonal.
    let mut permuted = logits.clone();
    for i in 0..n {
        let (a, b) = match i {
            0 | 1 => (3, 4),
            _ => (0, 1),
        };
        permuted.swap(i * n + a, i * n + b);
    }
    for i in 0..n {
        assert_eq!(permuted[i * n + i], logits[i * n + i]);
    }
    assert!((loss_of(permuted, n, &labels, 0.2) - base).abs() < 1e-12);
}

#[test]
fn absent_objective_is_zero_not_nan() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let r = infonce_from_logits(&mut g, l, &[0, 0], 0.1).unwrap();
    assert_eq!(r.positives, 0);
    assert_eq!(g.scalar(r.loss), 0.0);
}

#[test]
fn alpha_weights_closed_forms() {
    assert_eq!(alpha_weights(&[7, 7, 7], 1000.0).unwrap(), vec![1.0 / 3.0; 3]);
    assert_eq!(alpha_weights(&[5], 10.0).unwrap(), vec![1.0]);
    assert!(alpha_weights(&[1, 0], 10.0).is_err());

    // Sample shares 83%, 15%, 77% as counts, gamma = 1000:
    // ln(1 + 1000/830) = 0.790637, ln(1 + 1000/150) = 2.036882,
    // ln(1 + 1000/770) = 0.832342, total 3.659861.
    let a = alpha_weights(&[830, 150, 770], 1000.0).unwrap();
    let expected = [0.216_031, 0.556_545, 0.227_424];
    for (x, e) in a.iter().zip(expected) {
        assert!((x - e).abs() < 1e-6, "{a:?}");
    }
    assert!(a[1] > a[2] && a[2] > a[0]);
}

#[test]
fn alpha_is_a_simplex_and_scale_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let counts: Vec<usize> = (0..4).map(|_| rng.random_range(1..5000)).collect();
        let gamma = rng.random_range(1.0..5000.0);
        let a = alpha_weights(&counts, gamma).unwrap();
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let scaled: Vec<usize> = counts.iter().map(|c| c * 10).collect();
        let b = alpha_weights(&scaled, gamma * 10.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

fn tiny() -> ModelConfig {
    crate::model::tests_support::tiny_config()
}

fn tiny_batch(n: usize, seed: u64) -> TrainingBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = (0..n)
        .map(|i| crate::model::tests_support::random_input(&mut rng, i % 7))
        .collect();
    let items = (0..n)
        .map(|i| ItemFeatures {
            item: (i * 7 % 30) as u32,
            author: (i % 5) as u32,
            tag: (i % 4) as u32,
            popularity: 0.1 * i as f64,
        })
        .collect();
    let labels = (0..n)
        .map(|i| vec![(i % 2) as u8, (i % 3 == 0) as u8, 1])
        .collect();
    let pscore = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    TrainingBatch {
        users,
        items,
        labels,
        pscore,
    }
}

#[test]
fn duplicated_batch_recomputes_alpha_from_doubled_counts() {
    let params = init_params(&tiny(), 0);
    let batch = tiny_batch(6, 2);
    let mut doubled = batch.clone();
    doubled.users.extend(batch.users.clone());
    doubled.items.extend(batch.items.clone());
    doubled.labels.extend(batch.labels.clone());
    doubled.pscore.extend(batch.pscore.clone());
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let l = batch_loss(&mut g, &b, &tiny(), &doubled, 1.0).unwrap();
    // Positive counts per objective in the 6-row batch are (3, 2, 6).
    assert_eq!(l.alpha, alpha_weights(&[6, 4, 12], tiny().gamma).unwrap());
}

#[test]
fn single_objective_total_is_its_loss() {
    let cfg = ModelConfig { k: 1, ..tiny() };
    let params = init_params(&cfg, 0);
    let mut batch = tiny_batch(4, 3);
    for l in &mut batch.labels {
        l.truncate(1);
        l[0] = 1;
    }
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let l = batch_loss(&mut g, &b, &cfg, &batch, 1.0).unwrap();
    assert_eq!(l.alpha, vec![1.0]);
    assert_eq!(g.scalar(l.total), g.scalar(l.per_objective[0]));
}

#[test]
fn zero_initialised_quota_head_is_uniform() {
    let m = MpFormer::new(tiny(), 4).unwrap();
    let items: Vec<ItemFeatures> = tiny_batch(5, 4).items;
    for w in quota_weights(&m, &items).unwrap() {
        assert_eq!(w, vec![1.0 / 3.0; 3]);
    }
}

#[test]
fn quota_loss_closed_forms() {
    let mut g = Graph::new();
    let w = g.constant(Tensor::matrix(2, 3, vec![1.0 / 3.0; 6]).unwrap());
    let s = Tensor::matrix(2, 3, vec![0.3, -0.6, 0.9, 0.0, 0.6, 0.3]).unwrap();
    let p = [0.2, 0.3];
    let l = quota_loss(&mut g, w, &s, &p).unwrap();
    assert!(g.scalar(l) < 1e-30);

    let w1 = g.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
    let l = quota_loss(&mut g, w1, &Tensor::matrix(1, 1, vec![0.25]).unwrap(), &[-0.5]).unwrap();
    assert_eq!(g.scalar(l), 0.5625);

    let l = quota_loss(&mut g, w1, &Tensor::zeros(&[0, 1]), &[]).unwrap();
    assert_eq!(g.scalar(l), 0.0);
}

#[test]
fn quota_loss_gradient_reaches_only_the_head() {
    let mut m = MpFormer::new(tiny(), 5).unwrap();
    // Move the head off its zero init so every head parameter gets gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for name in ["quota.w2", "quota.b2"] {
        for v in m.params.get_mut(name).unwrap().data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let batch = tiny_batch(5, 6);
    let mut g = Graph::new();
    let b = m.params.bind(&mut g);
    let l = batch_loss(&mut g, &b, &m.config, &batch, 1.0).unwrap();
    let grads = g.backward(l.quota).unwrap();
    let grads = b.collect(&grads, &m.params);
    for (name, t) in grads.iter() {
        let zero = t.data().iter().all(|&v| v == 0.0);
        assert_eq!(zero, !is_quota_param(name), "{name}");
    }
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let case = GradCheckCase::small(4).unwrap();
    let report = case.run(1e-5, 1e-4).unwrap();
    assert!(report.passed(), "worst {:?}", report.worst());

    // The frozen-input objective differentiates to the training gradient.
    let mut g = Graph::new();
    let b = case.model.params.bind(&mut g);
    let loss = batch_loss(&mut g, &b, &case.model.config, &case.batch, case.lambda_quota).unwrap();
    let grads = g.backward(loss.objective).unwrap();
    let train = b.collect(&grads, &case.model.params);
    for c in &report.checks {
        let a = train.get(&c.param).unwrap().data()[c.index];
        assert!((a - c.analytic).abs() <= 1e-12 * (1.0 + a.abs()), "{} {}", c.param, c.index);
    }
}
