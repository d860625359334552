use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, positive_indices, Dataset, ExampleRef};
use crate::error::{Error, Result};
use crate::model::checkpoint::PARAMS_SECTION;
use crate::model::{Checkpoint, ItemFeatures, ModelConfig, MpFormer, UserInput};
use crate::numerics::Graph;

use super::optim::{Adam, AdamConfig};
use super::{batch_loss, LossBreakdown};

/// N positive pairs; every row's item is a negative for every other row.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub users: Vec<UserInput>,
    pub items: Vec<ItemFeatures>,
    /// Per-row labels in objective order.
    pub labels: Vec<Vec<u8>>,
    pub pscore: Vec<f64>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Assembles rows from dataset examples; each user input is the history
    /// strictly before the example.
    pub fn from_refs(ds: &Dataset, refs: &[ExampleRef], n_max: usize) -> Self {
        let mut batch = TrainingBatch {
            users: Vec::with_capacity(refs.len()),
            items: Vec::with_capacity(refs.len()),
            labels: Vec::with_capacity(refs.len()),
            pscore: Vec::with_capacity(refs.len()),
        };
        for &r in refs {
            let e = ds.get(r);
            batch.users.push(ds.user_input_before(r, n_max));
            batch.items.push(ds.items[e.item as usize]);
            batch.labels.push(e.labels().to_vec());
            batch.pscore.push(e.pscore);
        }
        batch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many steps in total, if set.
    pub max_steps: Option<u64>,
    pub lambda_quota: f64,
    /// Shuffling seed; epoch `e` shuffles with `seed + e`.
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            epochs: 5,
            max_steps: None,
            lambda_quota: 1.0,
            seed: 11,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if !(self.lambda_quota >= 0.0 && self.lambda_quota.is_finite()) {
            return Err(Error::config("lambda_quota", "must be finite and nonnegative"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::config("adam.lr", "must be positive"));
        }
        Ok(())
    }
}

/// One training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    /// `sum_k alpha_k L_k`.
    pub loss: f64,
    pub objective_losses: Vec<f64>,
    pub alpha: Vec<f64>,
    pub quota_loss: f64,
}

impl StepRecord {
    fn new(step: u64, epoch: usize, b: &LossBreakdown) -> Self {
        StepRecord {
            step,
            epoch,
            loss: b.total,
            objective_losses: b.per_objective.clone(),
            alpha: b.alpha.clone(),
            quota_loss: b.quota,
        }
    }
}

pub struct Trainer {
    pub model: MpFormer,
    pub adam: Adam,
    pub config: TrainConfig,
    /// Completed steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(model: MpFormer, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.adam.clone(), &model.params);
        Ok(Trainer {
            model,
            adam,
            config,
            step: 0,
        })
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &TrainingBatch) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let b = self.model.params.bind(&mut g);
        let loss = batch_loss(&mut g, &b, &self.model.config, batch, self.config.lambda_quota)?;
        let breakdown = loss.breakdown(&g);
        let value = g.scalar(loss.objective);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: self.step + 1,
                detail: format!("{breakdown:?}"),
            });
        }
        let grads = g.backward(loss.objective)?;
        let grads = b.collect(&grads, &self.model.params);
        self.adam.step(&mut self.model.params, &grads)?;
        self.step += 1;
        Ok(breakdown)
    }

    /// Trains until `epochs` passes over the positive training examples (or
    /// `max_steps`) are complete, resuming from the current step. Calls
    /// `on_step` after every update.
    pub fn run<F>(&mut self, ds: &Dataset, mut on_step: F) -> Result<Vec<StepRecord>>
    where
        F: FnMut(&StepRecord, &Trainer) -> Result<()>,
    {
        let refs = positive_indices(ds, &ds.train_refs());
        let per_epoch = (refs.len() / self.config.batch_size) as u64;
        if per_epoch == 0 {
            return Err(Error::invalid(format!(
                "{} training examples cannot fill a batch of {}",
                refs.len(),
                self.config.batch_size
            )));
        }
        let mut total = per_epoch * self.config.epochs as u64;
        if let Some(cap) = self.config.max_steps {
            total = total.min(cap);
        }
        let mut records = Vec::new();
        let mut cached: Option<(usize, Vec<Vec<ExampleRef>>)> = None;
        while self.step < total {
            let epoch = (self.step / per_epoch) as usize;
            let within = (self.step % per_epoch) as usize;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let seed = self.config.seed.wrapping_add(epoch as u64);
                cached = Some((epoch, make_batches(&refs, self.config.batch_size, seed)?));
            }
            let refs = &cached.as_ref().expect("filled above").1[within];
            let batch = TrainingBatch::from_refs(ds, refs, self.model.config.n_max);
            let b = self.train_step(&batch)?;
            let rec = StepRecord::new(self.step, epoch, &b);
            on_step(&rec, self)?;
            records.push(rec);
        }
        Ok(records)
    }

    /// Parameters and optimizer moments, with `run_config` recorded.
    pub fn to_checkpoint(&self, run_config: serde_json::Value) -> Checkpoint {
        let mut sections = BTreeMap::new();
        sections.insert(PARAMS_SECTION.to_string(), self.model.params.clone());
        sections.insert("adam.m".to_string(), self.adam.m.clone());
        sections.insert("adam.v".to_string(), self.adam.v.clone());
        Checkpoint {
            step: self.step,
            config: run_config,
            sections,
        }
    }

    /// Rebuilds a trainer from a checkpoint; missing optimizer state starts
    /// from zero moments.
    pub fn from_checkpoint(ck: &Checkpoint, model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        let model = MpFormer::from_params(model_config, ck.params()?.clone())?;
        let mut t = Trainer::new(model, config)?;
        if let (Some(m), Some(v)) = (ck.sections.get("adam.m"), ck.sections.get("adam.v")) {
            t.adam.m = m.clone();
            t.adam.v = v.clone();
            t.adam.t = ck.step;
        }
        t.step = ck.step;
        Ok(t)
    }
}
