use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;

use mpformer::data::{build_dataset, read_dataset, write_dataset, Dataset, WorldConfig};
use mpformer::model::{Checkpoint, ModelConfig, MpFormer};
use mpformer::objectives::{TrainConfig, Trainer};
use mpformer::retrieval::{
    build_indices, read_indices, serve_listener, write_indices, FusedResult, IvfParams, Request, SearchMode, ServingState,
};

fn world() -> (WorldConfig, Dataset) {
    let wc = WorldConfig {
        n_users: 60,
        n_items: 200,
        events_per_user: 60,
        ..WorldConfig::default()
    };
    let (_, ds) = build_dataset(&wc).unwrap();
    (wc, ds)
}

fn model_config(wc: &WorldConfig) -> ModelConfig {
    ModelConfig {
        d: 8,
        n_max: 12,
        ffn_hidden: 16,
        vocab: wc.vocab(),
        ..ModelConfig::default()
    }
}

fn train(wc: &WorldConfig, ds: &Dataset, steps: u64) -> Trainer {
    let tc = TrainConfig {
        batch_size: 64,
        max_steps: Some(steps),
        epochs: 100,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(MpFormer::new(model_config(wc), 1).unwrap(), tc).unwrap();
    t.run(ds, |_, _| Ok(())).unwrap();
    t
}

#[test]
fn training_lowers_the_contrastive_loss() {
    let (wc, ds) = world();
    let tc = TrainConfig {
        batch_size: 64,
        max_steps: Some(150),
        epochs: 100,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(MpFormer::new(model_config(&wc), 1).unwrap(), tc).unwrap();
    let recs = t.run(&ds, |_, _| Ok(())).unwrap();
    let mean = |r: &[mpformer::objectives::StepRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    let first = mean(&recs[..20]);
    let last = mean(&recs[recs.len() - 20..]);
    assert!(last < first - 0.1, "loss {first:.3} -> {last:.3}");
}

#[test]
fn training_is_deterministic() {
    let (wc, ds) = world();
    let a = train(&wc, &ds, 5);
    let b = train(&wc, &ds, 5);
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn dataset_checkpoint_and_indices_survive_a_round_trip() {
    let (wc, ds) = world();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&dir.path().join("data"), &ds, false).unwrap();
    assert_eq!(read_dataset(&dir.path().join("data")).unwrap(), ds);

    let t = train(&wc, &ds, 3);
    let ck = t.to_checkpoint(serde_json::json!({"note": "test"}));
    let hash = ck.save(&dir.path().join("ckpt")).unwrap();
    let (loaded, loaded_hash) = Checkpoint::load(&dir.path().join("ckpt")).unwrap();
    assert_eq!(hash, loaded_hash);
    assert_eq!(loaded, ck);
    let model = MpFormer::from_params(t.model.config.clone(), loaded.params().unwrap().clone()).unwrap();
    assert_eq!(model, t.model);

    let (indices, weights) = build_indices(&model, &ds, &hash, Some(IvfParams::default())).unwrap();
    write_indices(&dir.path().join("index"), &indices, &weights).unwrap();
    let (manifest, back, back_weights) = read_indices(&dir.path().join("index")).unwrap();
    assert_eq!(manifest.checkpoint_hash, hash);
    assert_eq!(back_weights, weights);
    let query = ds.user_input_at_holdout(3, model.config.n_max);
    let emb = model.user_embeddings(&[query]).unwrap();
    for (k, (a, b)) in indices.iter().zip(&back).enumerate() {
        let e = &emb[0].embeddings[k];
        assert_eq!(a.search_exact(e, 20).unwrap(), b.search_exact(e, 20).unwrap());
        assert_eq!(a.search_approx(e, 20).unwrap(), b.search_approx(e, 20).unwrap());
    }
}

#[test]
fn tcp_serving_answers_each_line() {
    let (wc, ds) = world();
    let t = train(&wc, &ds, 2);
    let (indices, weights) = build_indices(&t.model, &ds, "h", None).unwrap();
    let state = Arc::new(ServingState::new(t.model.clone(), indices, weights).unwrap());
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = {
        let state = Arc::clone(&state);
        std::thread::spawn(move || serve_listener(state, listener, Some(1)))
    };

    let user = ds.user_input_at_holdout(5, t.model.config.n_max);
    let req = Request {
        profile: user.profile,
        history: user.history.clone(),
        q_total: 30,
        mode: SearchMode::Exact,
    };
    let mut stream = TcpStream::connect(addr).unwrap();
    writeln!(stream, "{}", serde_json::to_string(&req).unwrap()).unwrap();
    writeln!(stream, "not json").unwrap();
    stream.shutdown(std::net::Shutdown::Write).unwrap();
    let lines: Vec<String> = BufReader::new(stream).lines().map(Result::unwrap).collect();
    server.join().unwrap().unwrap();

    assert_eq!(lines.len(), 2);
    let got: FusedResult = serde_json::from_str(&lines[0]).unwrap();
    assert_eq!(got, state.handle(&req).unwrap());
    assert_eq!(got.quota.iter().sum::<usize>(), 30);
    let err: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    assert!(err["error"].is_string());
}
