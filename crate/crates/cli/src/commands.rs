use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mpformer::data::{build_dataset, read_dataset, write_dataset, Dataset};
use mpformer::eval::{
    cost_table, evaluate, holdout_user_embeddings, qkv_cost, similarity_probe, CostModelInput, EvalReport,
    EvalTarget, QkvMode,
};
use mpformer::model::{Checkpoint, MpFormer};
use mpformer::objectives::{GradCheckCase, Trainer};
use mpformer::retrieval::{
    build_indices, read_indices, serve_lines, serve_tcp, write_indices, Request, ServingState,
};
use mpformer::{Error, Result};

use crate::config::RunConfig;
use crate::{Cli, Cmd};

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(e.to_string()))?;
    }
    let config = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    // Commands that start from a checkpoint only take settings the user gave.
    let given = (cli.config.is_some() || !cli.set.is_empty()).then_some(&config);
    match cli.cmd {
        Cmd::GenData { out, force } => gen_data(&config, &out, force),
        Cmd::Train {
            data,
            out,
            resume,
            log,
            save_every,
            grad_check,
        } => {
            let cfg = &config;
            if grad_check {
                return run_grad_check(cfg);
            }
            let need = |p: Option<PathBuf>, flag: &str| p.ok_or_else(|| Error::invalid(format!("train needs --{flag}")));
            let out = need(out, "out")?;
            let log = log.unwrap_or_else(|| out.join("train_log.jsonl"));
            train(cfg, &need(data, "data")?, &out, resume.as_deref(), &log, save_every)
        }
        Cmd::BuildIndex {
            checkpoint,
            data,
            out,
            force,
        } => build_index(&checkpoint, given, &data, &out, force),
        Cmd::Serve { checkpoint, index, tcp } => {
            let (cfg, state) = load_serving(&checkpoint, given, &index)?;
            match tcp {
                Some(addr) => {
                    let addr = if addr.is_empty() { cfg.serving.addr } else { addr };
                    serve_tcp(Arc::new(state), addr.as_str())
                }
                None => {
                    let n = serve_lines(&state, std::io::stdin().lock(), std::io::stdout().lock())?;
                    log::info!("answered {n} requests");
                    Ok(())
                }
            }
        }
        Cmd::Query {
            checkpoint,
            index,
            request,
            user,
            data,
            q_total,
            mode,
        } => {
            let (cfg, state) = load_serving(&checkpoint, given, &index)?;
            let mut req: Request = match (request, user, data) {
                (Some(r), _, _) => serde_json::from_str(&r)?,
                (None, Some(u), Some(d)) => {
                    let ds = read_dataset(&d)?;
                    if u >= ds.users.len() {
                        return Err(Error::invalid(format!("user {u} not in dataset")));
                    }
                    let input = ds.user_input_at_holdout(u, cfg.model.n_max);
                    Request {
                        profile: input.profile,
                        history: input.history,
                        q_total: cfg.serving.q_total,
                        mode: cfg.serving.mode,
                    }
                }
                _ => return Err(Error::invalid("query needs --request or --user with --data")),
            };
            if let Some(q) = q_total {
                req.q_total = q;
            }
            if let Some(m) = mode {
                req.mode = m.into();
            }
            let res = state.handle(&req)?;
            emit(&(serde_json::to_string(&res)? + "\n"))
        }
        Cmd::Eval {
            checkpoint,
            data,
            index,
            out,
        } => eval(&checkpoint, given, &data, index.as_deref(), out.as_deref()),
        Cmd::Bench {
            n,
            d,
            k,
            layers,
            max_k,
        } => bench(CostModelInput { n, d, k, layers }, max_k),
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) ends output quietly.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| Error::io(path, e))
}

fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let (_, ds) = build_dataset(&cfg.world)?;
    write_dataset(out, &ds, force)?;
    write_json(&out.join("run_config.json"), &cfg.to_value())?;
    let shares = ds.label_shares();
    log::info!(
        "wrote {} users, {} items, {} examples to {} (label shares {:.3} {:.3} {:.3})",
        ds.users.len(),
        ds.items.len(),
        ds.examples.iter().map(Vec::len).sum::<usize>(),
        out.display(),
        shares[0],
        shares[1],
        shares[2]
    );
    Ok(())
}

fn check_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    if ds.users.len() != cfg.world.n_users {
        return Err(Error::config("world.n_users", format!("dataset has {} users", ds.users.len())));
    }
    if ds.items.len() != cfg.world.n_items {
        return Err(Error::config("world.n_items", format!("dataset has {} items", ds.items.len())));
    }
    Ok(())
}

fn run_grad_check(cfg: &RunConfig) -> Result<()> {
    let case = GradCheckCase::small(cfg.seed)?;
    let report = case.run(1e-5, 1e-4)?;
    let mut text = String::new();
    for (name, err) in report.per_param() {
        text += &format!("{name} {err:.3e}\n");
    }
    text += &format!("max_rel_error {:.3e} over {} scalars\n", report.max_rel_error(), report.checks.len());
    emit(&text)?;
    if report.passed() {
        Ok(())
    } else {
        let w = report.worst().expect("failed report has checks");
        Err(Error::invalid(format!(
            "gradient check failed at {}[{}]: analytic {} numeric {}",
            w.param, w.index, w.analytic, w.numeric
        )))
    }
}

fn train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    log_path: &Path,
    save_every: Option<u64>,
) -> Result<()> {
    let ds = read_dataset(data)?;
    check_dataset(cfg, &ds)?;
    let mut trainer = match resume {
        Some(dir) => {
            let (ck, _) = Checkpoint::load(dir)?;
            let prev = RunConfig::from_value(&ck.config)?;
            if prev.model != cfg.model {
                return Err(Error::config("model", "differs from the checkpoint being resumed"));
            }
            Trainer::from_checkpoint(&ck, cfg.model.clone(), cfg.train.clone())?
        }
        None => Trainer::new(MpFormer::new(cfg.model.clone(), cfg.seed)?, cfg.train.clone())?,
    };
    let start = trainer.step;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if let Some(parent) = log_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = if start > 0 {
        File::options().append(true).create(true).open(log_path)
    } else {
        File::create(log_path)
    }
    .map_err(|e| Error::io(log_path, e))?;
    let mut log = BufWriter::new(file);
    let run_config = cfg.to_value();
    trainer.run(&ds, |rec, t| {
        serde_json::to_writer(&mut log, rec)?;
        log.write_all(b"\n").map_err(|e| Error::io(log_path, e))?;
        if rec.step % 10 == 0 {
            log::info!("step {} epoch {} loss {:.4} quota {:.5}", rec.step, rec.epoch, rec.loss, rec.quota_loss);
        }
        if save_every.is_some_and(|n| n > 0 && rec.step % n == 0) {
            t.to_checkpoint(run_config.clone()).save(out)?;
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(log_path, e))?;
    let hash = trainer.to_checkpoint(run_config).save(out)?;
    log::info!("trained steps {start}..{}; checkpoint {} ({hash})", trainer.step, out.display());
    Ok(())
}

/// Loads a checkpoint with its run configuration. A user-given configuration
/// must agree on world and model and supplies the serving settings.
fn load_model(checkpoint: &Path, given: Option<&RunConfig>) -> Result<(RunConfig, MpFormer, String)> {
    let (ck, hash) = Checkpoint::load(checkpoint)?;
    let mut cfg = RunConfig::from_value(&ck.config)?;
    if let Some(user) = given {
        if user.world != cfg.world {
            return Err(Error::config("world", "differs from the checkpoint's configuration"));
        }
        if user.model != cfg.model {
            return Err(Error::config("model", "differs from the checkpoint's configuration"));
        }
        cfg.serving = user.serving.clone();
    }
    let model = MpFormer::from_params(cfg.model.clone(), ck.params()?.clone())?;
    Ok((cfg, model, hash))
}

fn build_index(checkpoint: &Path, given: Option<&RunConfig>, data: &Path, out: &Path, force: bool) -> Result<()> {
    if out.join("indices.json").exists() && !force {
        return Err(Error::invalid(format!("{} holds an index; pass --force to overwrite", out.display())));
    }
    let (cfg, model, hash) = load_model(checkpoint, given)?;
    let ds = read_dataset(data)?;
    check_dataset(&cfg, &ds)?;
    let ivf = cfg.serving.ann.then(|| cfg.serving.ivf.clone());
    let (indices, weights) = build_indices(&model, &ds, &hash, ivf)?;
    write_indices(out, &indices, &weights)?;
    let sizes: Vec<usize> = indices.iter().map(|i| i.len()).collect();
    log::info!("index sizes {sizes:?}, mean weights {:?}", weights.mean());
    Ok(())
}

fn load_serving(checkpoint: &Path, given: Option<&RunConfig>, index: &Path) -> Result<(RunConfig, ServingState)> {
    let (cfg, model, hash) = load_model(checkpoint, given)?;
    let (set, indices, weights) = read_indices(index)?;
    if set.checkpoint_hash != hash {
        return Err(Error::Index(format!(
            "index was built from checkpoint {} but {} has hash {hash}",
            set.checkpoint_hash,
            checkpoint.display()
        )));
    }
    Ok((cfg, ServingState::new(model, indices, weights)?))
}

fn eval(checkpoint: &Path, given: Option<&RunConfig>, data: &Path, index: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (cfg, model, hash) = load_model(checkpoint, given)?;
    let ds = read_dataset(data)?;
    check_dataset(&cfg, &ds)?;
    let m = &cfg.model;
    let mut reports = vec![evaluate(&model, &ds, EvalTarget::FullCatalog)?];
    if let Some(dir) = index {
        let (set, indices, _) = read_indices(dir)?;
        if set.checkpoint_hash != hash {
            return Err(Error::Index("index and checkpoint hashes differ".into()));
        }
        reports.push(evaluate(&model, &ds, EvalTarget::Indices(&indices))?);
    }
    let probe = similarity_probe(&holdout_user_embeddings(&model, &ds)?);
    let ks: Vec<u64> = (1..=m.k.max(8) as u64).collect();
    let cost = cost_table(m.n_max as u64, m.d as u64, m.layers as u64, &ks);
    for r in &mut reports {
        r.cost = cost.clone();
        r.probe = Some(probe.clone());
        emit(&r.render())?;
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for r in &reports {
            let name = match r.mode {
                mpformer::eval::EvalMode::FullCatalog => "full_catalog",
                mpformer::eval::EvalMode::InIndex => "in_index",
            };
            let p = dir.join(format!("metrics_{name}.txt"));
            fs::write(&p, r.metric_lines()).map_err(|e| Error::io(&p, e))?;
        }
        let full: &EvalReport = &reports[0];
        write_json(
            &dir.join("report.json"),
            &serde_json::json!({ "checkpoint_hash": hash, "config": cfg.to_value(), "reports": reports }),
        )?;
        let p = dir.join("similarity_histogram.csv");
        let f = File::create(&p).map_err(|e| Error::io(&p, e))?;
        full.probe
            .as_ref()
            .expect("set above")
            .write_csv(BufWriter::new(f))
            .map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn bench(inp: CostModelInput, max_k: Option<u64>) -> Result<()> {
    inp.validate()?;
    let ind = qkv_cost(inp, QkvMode::Independent);
    let sh = qkv_cost(inp, QkvMode::Shared);
    let mut text = format!("n {} d {} k {} layers {}\n", inp.n, inp.d, inp.k, inp.layers);
    text += &format!("independent {ind}\nshared {sh}\nratio {:.6}\n", ind as f64 / sh as f64);
    if let Some(m) = max_k {
        let ks: Vec<u64> = (1..=m).collect();
        text += "k independent shared ratio\n";
        for (k, i, s) in cost_table(inp.n, inp.d, inp.layers, &ks) {
            text += &format!("{k} {i} {s} {:.6}\n", i as f64 / s as f64);
        }
    }
    emit(&text)?;
    Ok(())
}
