//! Multitask pre-training and the transfer baselines built on it: k nearest
//! neighbours on hidden activations, fine-tuning the top layers, and
//! fine-tuning everything.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chemgraph::{MolecularGraph, Task};
use crate::error::{Error, Result};
use crate::evalbench::finetune::{finetune_subset, FinetuneConfig, FinetuneOutcome};
use crate::ggnn::{
    config_for, forward_batch, fresh_tensor, init_params, is_head_param, penultimate_batch,
    GraphBatch, Mode, ModelConfig,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamSet;
use crate::tensor::{grad, Tape, Tensor};

/// Graphs with a label matrix and an observation mask, both row-major
/// `graphs x tasks`.
#[derive(Debug, Clone)]
pub struct MultitaskBatch {
    graphs: Vec<Arc<MolecularGraph>>,
    labels: Vec<f64>,
    mask: Vec<f64>,
    num_tasks: usize,
}

impl MultitaskBatch {
    pub fn new(
        graphs: Vec<Arc<MolecularGraph>>,
        labels: Vec<f64>,
        mask: Vec<f64>,
        num_tasks: usize,
    ) -> Result<Self> {
        let cells = graphs.len() * num_tasks;
        if num_tasks == 0 || labels.len() != cells || mask.len() != cells {
            return Err(Error::data(format!(
                "{} graphs x {num_tasks} tasks needs {cells} labels and mask entries, got {} and {}",
                graphs.len(),
                labels.len(),
                mask.len()
            )));
        }
        for (row, (l, m)) in labels
            .chunks(num_tasks)
            .zip(mask.chunks(num_tasks))
            .enumerate()
        {
            if m.iter().any(|&x| x != 0.0 && x != 1.0) {
                return Err(Error::data(format!("row {row}: mask entries must be 0 or 1")));
            }
            if m.iter().all(|&x| x == 0.0) {
                return Err(Error::data(format!("row {row} has no observed label")));
            }
            if l.iter().zip(m).any(|(&y, &o)| o == 1.0 && y != 0.0 && y != 1.0) {
                return Err(Error::data(format!("row {row}: observed labels must be 0 or 1")));
            }
        }
        Ok(Self {
            graphs,
            labels,
            mask,
            num_tasks,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn graphs(&self) -> &[Arc<MolecularGraph>] {
        &self.graphs
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn rows(&self, rows: &[usize]) -> MultitaskBatch {
        let t = self.num_tasks;
        let pick = |v: &[f64]| rows.iter().flat_map(|&r| v[r * t..(r + 1) * t].iter().copied()).collect();
        MultitaskBatch {
            graphs: rows.iter().map(|&r| self.graphs[r].clone()).collect(),
            labels: pick(&self.labels),
            mask: pick(&self.mask),
            num_tasks: t,
        }
    }

    /// Masked mean BCE of `logits` (`rows x tasks`).
    pub fn loss(&self, logits: &Tensor) -> Result<Tensor> {
        Ok(logits.masked_bce_with_logits(&self.labels, &self.mask)?)
    }
}

#[derive(Debug, Clone)]
pub struct MultitaskData {
    /// Task id per label column.
    pub columns: Vec<String>,
    pub train: MultitaskBatch,
    pub val: MultitaskBatch,
}

/// Pools every instance of `tasks` into one label matrix. Within each task a
/// `val_fraction` share of instances goes to the validation matrix. A
/// molecule labeled for several tasks shares one row per side.
pub fn multitask_data<R: Rng + ?Sized>(
    tasks: &[&Task],
    val_fraction: f64,
    rng: &mut R,
) -> Result<MultitaskData> {
    if tasks.is_empty() {
        return Err(Error::data("multitask pre-training needs at least one task"));
    }
    if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
        return Err(Error::config("val_fraction must lie in (0, 1)"));
    }
    let n_tasks = tasks.len();
    let mut sides: [(Vec<Arc<MolecularGraph>>, Vec<f64>, Vec<f64>); 2] = Default::default();
    let mut row_of: [HashMap<*const MolecularGraph, usize>; 2] = Default::default();
    for (col, task) in tasks.iter().enumerate() {
        let mut idx: Vec<usize> = (0..task.instances.len()).collect();
        idx.shuffle(rng);
        let n_val = ((task.instances.len() as f64) * val_fraction).ceil() as usize;
        for (pos, &i) in idx.iter().enumerate() {
            let side = usize::from(pos < n_val);
            let (g, y) = &task.instances[i];
            let (graphs, labels, mask) = &mut sides[side];
            let row = *row_of[side].entry(Arc::as_ptr(g)).or_insert_with(|| {
                graphs.push(g.clone());
                labels.extend(std::iter::repeat(0.0).take(n_tasks));
                mask.extend(std::iter::repeat(0.0).take(n_tasks));
                graphs.len() - 1
            });
            labels[row * n_tasks + col] = f64::from(*y);
            mask[row * n_tasks + col] = 1.0;
        }
    }
    let [(tg, tl, tm), (vg, vl, vm)] = sides;
    if vg.is_empty() {
        return Err(Error::data("no validation rows for multitask pre-training"));
    }
    Ok(MultitaskData {
        columns: tasks.iter().map(|t| t.id.clone()).collect(),
        train: MultitaskBatch::new(tg, tl, tm, n_tasks)?,
        val: MultitaskBatch::new(vg, vl, vm, n_tasks)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub val_fraction: f64,
    pub eval_chunk: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 10f64.powf(-3.75),
            batch_size: 512,
            patience: 20,
            max_epochs: 200,
            val_fraction: 0.1,
            eval_chunk: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ParamSet,
    pub model: ModelConfig,
    pub columns: Vec<String>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn multitask_eval_loss(
    params: &ParamSet,
    data: &MultitaskBatch,
    model: &ModelConfig,
    chunk: usize,
) -> Result<f64> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let params = params.detach();
    let (mut total, mut count) = (0.0, 0.0);
    let rows: Vec<usize> = (0..data.len()).collect();
    for part in rows.chunks(chunk.max(1)) {
        let sub = data.rows(part);
        let graphs: Vec<&MolecularGraph> = sub.graphs.iter().map(|g| g.as_ref()).collect();
        let logits = forward_batch(&GraphBatch::new(&graphs, model)?, &params, model, Mode::Eval, &mut rng)?;
        let observed: f64 = sub.mask.iter().sum();
        total += sub.loss(&logits)?.item() * observed;
        count += observed;
    }
    Ok(total / count)
}

/// Trains a GGNN with one output column per task under masked BCE, with early
/// stopping on the held-out rows. `model.output_dim` is overridden.
pub fn pretrain_multitask<R: Rng + ?Sized>(
    tasks: &[&Task],
    model: &ModelConfig,
    config: &PretrainConfig,
    rng: &mut R,
) -> Result<PretrainOutcome> {
    if config.batch_size == 0 || config.patience == 0 {
        return Err(Error::config("batch_size and patience must be positive"));
    }
    let data = multitask_data(tasks, config.val_fraction, rng)?;
    let model = ModelConfig {
        output_dim: data.columns.len(),
        ..model.clone()
    };
    let mut current = init_params(&model, rng)?;
    let mut best = current.clone();
    let mut best_loss = multitask_eval_loss(&current, &data.val, &model, config.eval_chunk)?;
    let mut best_epoch = 0;
    let mut state = AdamState::new(&current, AdamConfig::default());
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = Vec::new();
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(rng);
        let (mut seen_loss, mut seen) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch = data.train.rows(chunk);
            let graphs: Vec<&MolecularGraph> = batch.graphs.iter().map(|g| g.as_ref()).collect();
            let tape = Tape::new();
            let vars = current.attach(&tape);
            let logits = forward_batch(&GraphBatch::new(&graphs, &model)?, &vars, &model, Mode::Train, rng)?;
            let loss = batch.loss(&logits)?;
            if !loss.item().is_finite() {
                return Err(Error::Numeric(format!("non-finite pre-training loss at epoch {epoch}")));
            }
            let observed: f64 = batch.mask.iter().sum();
            seen_loss += loss.item() * observed;
            seen += observed;
            let targets: Vec<&Tensor> = vars.tensors().collect();
            let grads: ParamSet = vars
                .names()
                .map(str::to_string)
                .zip(grad(&loss, &targets, false)?)
                .collect();
            let (next, updated) = adam_step(&state, &current, &grads, config.lr)?;
            state = next;
            current = updated;
        }
        let val_loss = multitask_eval_loss(&current, &data.val, &model, config.eval_chunk)?;
        log::info!("pretrain epoch {epoch}: train {:.5} val {val_loss:.5}", seen_loss / seen);
        log.push(EpochLog {
            epoch,
            train_loss: seen_loss / seen,
            val_loss,
        });
        if val_loss < best_loss {
            best_loss = val_loss;
            best = current.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(PretrainOutcome {
        params: best,
        model,
        columns: data.columns,
        best_epoch,
        log,
    })
}

/// Mean label of the `n_neighbors` references closest to each query under
/// Euclidean distance; equal distances go to the lower reference index.
pub fn knn_scores(
    references: &[Vec<f64>],
    reference_labels: &[u8],
    queries: &[Vec<f64>],
    n_neighbors: usize,
) -> Result<Vec<f64>> {
    if n_neighbors == 0 || references.len() < n_neighbors {
        return Err(Error::data(format!(
            "{} references cannot supply {n_neighbors} neighbours",
            references.len()
        )));
    }
    if references.len() != reference_labels.len() {
        return Err(Error::data("one label per reference required"));
    }
    Ok(queries
        .iter()
        .map(|q| {
            let mut dist: Vec<(f64, usize)> = references
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let d: f64 = r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, i)
                })
                .collect();
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let hits: u32 = dist[..n_neighbors]
                .iter()
                .map(|&(_, i)| u32::from(reference_labels[i]))
                .sum();
            f64::from(hits) / n_neighbors as f64
        })
        .collect())
}

fn embed(
    graphs: &[&MolecularGraph],
    params: &ParamSet,
    model: &ModelConfig,
    chunk: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(graphs.len());
    for part in graphs.chunks(chunk.max(1)) {
        let hidden = penultimate_batch(&GraphBatch::new(part, model)?, params, model)?;
        out.extend(hidden.data().chunks(model.hidden_width).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// k-NN scores on the task's test partition, with the given train-partition
/// instances as references, embedded by the pretrained hidden layer.
pub fn knn_predict(
    pretrained: &ParamSet,
    model: &ModelConfig,
    task: &Task,
    reference: &[usize],
    n_neighbors: usize,
) -> Result<Vec<f64>> {
    let model = config_for(pretrained, model)?;
    let params = pretrained.detach();
    let refs = task.subset(reference);
    let tests = task.subset(&task.partitions.test);
    let as_graphs = |d: &[(Arc<MolecularGraph>, u8)]| d.iter().map(|(g, _)| g.clone()).collect::<Vec<_>>();
    let (rg, tg) = (as_graphs(&refs), as_graphs(&tests));
    let r: Vec<&MolecularGraph> = rg.iter().map(|g| g.as_ref()).collect();
    let t: Vec<&MolecularGraph> = tg.iter().map(|g| g.as_ref()).collect();
    let labels: Vec<u8> = refs.iter().map(|(_, y)| *y).collect();
    knn_scores(&embed(&r, &params, &model, 128)?, &labels, &embed(&t, &params, &model, 128)?, n_neighbors)
}

/// Pretrained weights with a fresh single-output head.
pub fn replace_head<R: Rng + ?Sized>(
    pretrained: &ParamSet,
    model: &ModelConfig,
    rng: &mut R,
) -> Result<ParamSet> {
    reinitialize(pretrained, model, is_head_param, rng)
}

fn reinitialize<R: Rng + ?Sized>(
    pretrained: &ParamSet,
    model: &ModelConfig,
    fresh: impl Fn(&str) -> bool,
    rng: &mut R,
) -> Result<ParamSet> {
    let single = ModelConfig {
        output_dim: 1,
        ..model.clone()
    };
    let mut out = ParamSet::new();
    for (name, shape) in single.schema() {
        let t = if fresh(&name) {
            fresh_tensor(&shape, rng)?
        } else {
            pretrained.require(&name)?.detach()
        };
        out.insert(name, t);
    }
    single.check_params(&out)?;
    Ok(out)
}

fn is_top_param(name: &str) -> bool {
    name.starts_with("mlp.0.") || is_head_param(name)
}

/// Reinitializes and trains the hidden layer and a new head; message-passing
/// layers stay frozen.
pub fn finetune_top<R: Rng + ?Sized>(
    pretrained: &ParamSet,
    model: &ModelConfig,
    task: &Task,
    instances: &[usize],
    config: &FinetuneConfig,
    rng: &mut R,
) -> Result<FinetuneOutcome> {
    let init = reinitialize(pretrained, model, is_top_param, rng)?;
    let single = ModelConfig {
        output_dim: 1,
        ..model.clone()
    };
    finetune_subset(&init, is_top_param, task, instances, &single, config, rng)
}

pub fn finetune_top_trainable(model: &ModelConfig) -> usize {
    let single = ModelConfig {
        output_dim: 1,
        ..model.clone()
    };
    single
        .schema()
        .iter()
        .filter(|(n, _)| is_top_param(n))
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// New head, then every parameter trained.
pub fn finetune_all<R: Rng + ?Sized>(
    pretrained: &ParamSet,
    model: &ModelConfig,
    task: &Task,
    instances: &[usize],
    config: &FinetuneConfig,
    rng: &mut R,
) -> Result<FinetuneOutcome> {
    let init = replace_head(pretrained, model, rng)?;
    let single = ModelConfig {
        output_dim: 1,
        ..model.clone()
    };
    finetune_subset(&init, |_| true, task, instances, &single, config, rng)
}
