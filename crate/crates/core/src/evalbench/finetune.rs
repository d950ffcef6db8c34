use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chemgraph::{MolecularGraph, Task};
use crate::error::{Error, Result};
use crate::ggnn::{forward_batch, predict_logits, GraphBatch, Mode, ModelConfig};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamSet;
use crate::tensor::{grad, Tape, Tensor};

use super::auprc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub lr: f64,
    /// Batches hold `min(max_batch, k)` instances.
    pub max_batch: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Graphs per forward pass when scoring.
    pub eval_chunk: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            max_batch: 64,
            patience: 10,
            max_epochs: 500,
            eval_chunk: 128,
        }
    }
}

impl FinetuneConfig {
    pub fn batch_size(&self, k: usize) -> usize {
        k.min(self.max_batch)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || self.max_batch == 0 || self.patience == 0 {
            return Err(Error::config(
                "fine-tuning needs lr >= 0, max_batch >= 1 and patience >= 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen, initialization included.
    pub params: ParamSet,
    /// Validation loss before training, then after each epoch.
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    pub train_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: ParamSet,
    pub auprc: f64,
    pub instances: Vec<usize>,
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
}

/// `k` distinct indices from the task's train partition.
pub fn sample_instances<R: Rng + ?Sized>(task: &Task, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let pool = &task.partitions.train;
    if k == 0 || pool.len() < k {
        return Err(Error::data(format!(
            "task `{}` has {} training instances, {k} requested",
            task.id,
            pool.len()
        )));
    }
    Ok(pool.choose_multiple(rng, k).copied().collect())
}

fn bce_from_logit(z: f64, y: u8) -> f64 {
    z.max(0.0) - z * f64::from(y) + (-z.abs()).exp().ln_1p()
}

/// Mean BCE in eval mode.
pub fn mean_bce(
    params: &ParamSet,
    data: &[(Arc<MolecularGraph>, u8)],
    model: &ModelConfig,
    chunk: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data("loss over an empty set"));
    }
    let graphs: Vec<&MolecularGraph> = data.iter().map(|(g, _)| g.as_ref()).collect();
    let logits = predict_logits(&graphs, params, model, chunk)?;
    let total: f64 = logits.iter().zip(data).map(|(&z, (_, y))| bce_from_logit(z, *y)).sum();
    Ok(total / data.len() as f64)
}

/// Scores and labels on the task's test partition.
pub fn test_scores(
    params: &ParamSet,
    task: &Task,
    model: &ModelConfig,
    chunk: usize,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let data = task.subset(&task.partitions.test);
    let graphs: Vec<&MolecularGraph> = data.iter().map(|(g, _)| g.as_ref()).collect();
    let scores = predict_logits(&graphs, params, model, chunk)?;
    Ok((scores, data.iter().map(|(_, y)| *y).collect()))
}

pub fn test_auprc(params: &ParamSet, task: &Task, model: &ModelConfig, chunk: usize) -> Result<f64> {
    let (scores, labels) = test_scores(params, task, model, chunk)?;
    auprc(&scores, &labels)
}

/// Mean BCE of one mini-batch in train mode, on the tape of `params`.
pub fn batch_loss<R: Rng + ?Sized>(
    params: &ParamSet,
    data: &[(Arc<MolecularGraph>, u8)],
    model: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    let graphs: Vec<&MolecularGraph> = data.iter().map(|(g, _)| g.as_ref()).collect();
    let batch = GraphBatch::new(&graphs, model)?;
    let logits = forward_batch(&batch, params, model, mode, rng)?;
    let labels: Vec<f64> = data.iter().map(|(_, y)| f64::from(*y)).collect();
    Ok(logits.bce_with_logits(&labels)?)
}

/// Adam on the `trainable` entries over the given training instances, with
/// early stopping on validation BCE. Frozen entries are never touched.
pub fn train_with_early_stopping<R: Rng + ?Sized>(
    init: &ParamSet,
    trainable: impl Fn(&str) -> bool,
    train: &[(Arc<MolecularGraph>, u8)],
    val: &[(Arc<MolecularGraph>, u8)],
    model: &ModelConfig,
    config: &FinetuneConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::data("no training instances"));
    }
    let mut current = init.detach();
    let mut best = current.clone();
    let mut best_loss = mean_bce(&current, val, model, config.eval_chunk)?;
    let mut outcome = TrainOutcome {
        params: ParamSet::new(),
        val_losses: vec![best_loss],
        best_epoch: 0,
        train_losses: Vec::new(),
    };
    let mut state = AdamState::new(&current.subset(&trainable), AdamConfig::default());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let b = config.batch_size(train.len());
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(b) {
            let batch: Vec<_> = chunk.iter().map(|&i| train[i].clone()).collect();
            let tape = Tape::new();
            let vars = current.subset(&trainable).attach(&tape);
            let full = current.merged(&vars)?;
            let loss = batch_loss(&full, &batch, model, Mode::Train, rng)?;
            if !loss.item().is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}")));
            }
            epoch_loss += loss.item() * batch.len() as f64;
            let targets: Vec<&Tensor> = vars.tensors().collect();
            let grads: ParamSet = vars
                .names()
                .map(str::to_string)
                .zip(grad(&loss, &targets, false)?)
                .collect();
            let (next_state, updated) = adam_step(&state, &vars.detach(), &grads, config.lr)?;
            state = next_state;
            current = current.merged(&updated)?;
        }
        outcome.train_losses.push(epoch_loss / train.len() as f64);
        let val_loss = mean_bce(&current, val, model, config.eval_chunk)?;
        outcome.val_losses.push(val_loss);
        if val_loss < best_loss {
            best_loss = val_loss;
            best = current.clone();
            outcome.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    outcome.params = best;
    Ok(outcome)
}

/// Fine-tunes every parameter of `init` on the given train-partition
/// instances and reports test AUPRC of the best-validation parameters.
pub fn finetune_on_instances<R: Rng + ?Sized>(
    init: &ParamSet,
    task: &Task,
    instances: &[usize],
    model: &ModelConfig,
    config: &FinetuneConfig,
    rng: &mut R,
) -> Result<FinetuneOutcome> {
    finetune_subset(init, |_| true, task, instances, model, config, rng)
}

pub(crate) fn finetune_subset<R: Rng + ?Sized>(
    init: &ParamSet,
    trainable: impl Fn(&str) -> bool,
    task: &Task,
    instances: &[usize],
    model: &ModelConfig,
    config: &FinetuneConfig,
    rng: &mut R,
) -> Result<FinetuneOutcome> {
    check_task(task)?;
    let train = task.subset(instances);
    let val = task.subset(&task.partitions.val);
    let trained = train_with_early_stopping(init, trainable, &train, &val, model, config, rng)?;
    Ok(FinetuneOutcome {
        auprc: test_auprc(&trained.params, task, model, config.eval_chunk)?,
        params: trained.params,
        instances: instances.to_vec(),
        val_losses: trained.val_losses,
        best_epoch: trained.best_epoch,
    })
}

pub(crate) fn check_task(task: &Task) -> Result<()> {
    if task.partitions.val.is_empty() {
        return Err(Error::data(format!("task `{}` has no validation instances", task.id)));
    }
    let test: Vec<u8> = task.partitions.test.iter().map(|&i| task.instances[i].1).collect();
    if !test.contains(&0) || !test.contains(&1) {
        return Err(Error::data(format!("task `{}` test partition is single-class", task.id)));
    }
    Ok(())
}

/// Samples `k` instances with `rng`, then fine-tunes with the same `rng`.
pub fn finetune<R: Rng + ?Sized>(
    init: &ParamSet,
    task: &Task,
    k: usize,
    model: &ModelConfig,
    config: &FinetuneConfig,
    rng: &mut R,
) -> Result<FinetuneOutcome> {
    let instances = sample_instances(task, k, rng)?;
    finetune_on_instances(init, task, &instances, model, config, rng)
}
