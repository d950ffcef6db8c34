//! Episodic meta-training of an initialization: MAML with exact second-order
//! outer gradients, first-order MAML, and ANIL (inner loop restricted to the
//! output head).

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chemgraph::{MolecularGraph, Task, TaskRegistry};
use crate::error::{Error, Result};
use crate::evalbench::finetune::{batch_loss, finetune_on_instances, FinetuneConfig};
use crate::evalbench::{instance_set, run_seed};
use crate::ggnn::{is_head_param, Mode, ModelConfig};
use crate::optim::{adam_step, sgd_step, AdamConfig, AdamState};
use crate::params::ParamSet;
use crate::tensor::{grad, Tape, Tensor};

pub type Labeled = (Arc<MolecularGraph>, u8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Maml,
    Fomaml,
    Anil,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Maml => "maml",
            Algorithm::Fomaml => "fomaml",
            Algorithm::Anil => "anil",
        }
    }

    fn second_order(self) -> bool {
        self != Algorithm::Fomaml
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maml" => Ok(Algorithm::Maml),
            "fomaml" => Ok(Algorithm::Fomaml),
            "anil" => Ok(Algorithm::Anil),
            other => Err(Error::config(format!(
                "unknown algorithm `{other}` (expected maml, fomaml or anil)"
            ))),
        }
    }
}

/// Which layer ANIL adapts in its inner loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnilLayer {
    #[default]
    Head,
    Hidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterOptimizer {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub algorithm: Algorithm,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub inner_batch: usize,
    pub query_size: usize,
    pub meta_batch: usize,
    /// `None` picks 0.003, or 0.0015 for first-order MAML.
    pub outer_lr: Option<f64>,
    pub outer_optimizer: OuterOptimizer,
    pub anil_layer: AnilLayer,
    pub inner_dropout: bool,
    pub max_meta_iterations: usize,
    pub val_every: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    /// Fine-tuning instances per validation task; capped at the train
    /// partition size.
    pub k_val: usize,
    /// Instance sets averaged per validation task.
    pub val_sets: usize,
    pub val_finetune: FinetuneConfig,
    pub base_seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Maml,
            inner_lr: 0.05,
            inner_steps: 2,
            inner_batch: 32,
            query_size: 32,
            meta_batch: 32,
            outer_lr: None,
            outer_optimizer: OuterOptimizer::Adam,
            anil_layer: AnilLayer::Head,
            inner_dropout: false,
            max_meta_iterations: 1000,
            val_every: 50,
            patience: 10,
            k_val: 128,
            val_sets: 1,
            val_finetune: FinetuneConfig::default(),
            base_seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn outer_lr(&self) -> f64 {
        self.outer_lr.unwrap_or(match self.algorithm {
            Algorithm::Fomaml => 0.0015,
            _ => 0.003,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr >= 0.0) || !(self.outer_lr() >= 0.0) {
            return Err(Error::config("learning rates must be non-negative"));
        }
        if self.meta_batch == 0 {
            return Err(Error::config("meta_batch must be at least 1"));
        }
        if self.inner_batch == 0 || self.query_size == 0 {
            return Err(Error::config("support and query sizes must be positive"));
        }
        if self.val_every == 0 || self.patience == 0 || self.k_val == 0 || self.val_sets == 0 {
            return Err(Error::config("val_every, patience, k_val and val_sets must be positive"));
        }
        self.val_finetune.validate()
    }

    /// Whether the inner loop updates parameter `name`.
    pub fn adapts(&self, name: &str) -> bool {
        match (self.algorithm, self.anil_layer) {
            (Algorithm::Anil, AnilLayer::Head) => is_head_param(name),
            (Algorithm::Anil, AnilLayer::Hidden) => name.starts_with("mlp.0."),
            _ => true,
        }
    }
}

/// A differentiable loss over a batch of examples.
pub trait Learner {
    type Example: Clone;

    fn loss<R: Rng + ?Sized>(
        &self,
        params: &ParamSet,
        batch: &[Self::Example],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor>;
}

/// Mean BCE of the graph network on labeled molecules.
#[derive(Debug, Clone)]
pub struct GgnnLearner {
    pub model: ModelConfig,
}

impl Learner for GgnnLearner {
    type Example = Labeled;

    fn loss<R: Rng + ?Sized>(
        &self,
        params: &ParamSet,
        batch: &[Labeled],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor> {
        batch_loss(params, batch, &self.model, mode, rng)
    }
}

/// One scalar parameter `theta` with loss `mean_c (theta - c)^2 / 2` over a
/// batch of centers `c`. Small enough that meta-gradients have closed forms.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuadraticSurrogate;

impl QuadraticSurrogate {
    pub fn params(theta: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::scalar(theta));
        p
    }
}

impl Learner for QuadraticSurrogate {
    type Example = f64;

    fn loss<R: Rng + ?Sized>(&self, params: &ParamSet, batch: &[f64], _: Mode, _: &mut R) -> Result<Tensor> {
        if batch.is_empty() {
            return Err(Error::data("empty batch"));
        }
        let theta = params.require("theta")?;
        let mut total = Tensor::scalar(0.0);
        for &c in batch {
            let d = theta.sub(&Tensor::scalar(c))?;
            total = total.add(&d.mul(&d)?)?;
        }
        Ok(total.scale(0.5 / batch.len() as f64)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode<E> {
    pub task_id: String,
    pub support: Vec<E>,
    pub query: Vec<E>,
}

/// Disjoint support and query samples from the task's train partition.
pub fn sample_episode<R: Rng + ?Sized>(
    task: &Task,
    inner_batch: usize,
    query_size: usize,
    rng: &mut R,
) -> Result<Episode<Labeled>> {
    let pool = &task.partitions.train;
    let need = inner_batch + query_size;
    if pool.len() < need {
        return Err(Error::data(format!(
            "task `{}` has {} training instances, an episode needs {need}",
            task.id,
            pool.len()
        )));
    }
    let picked: Vec<usize> = pool.choose_multiple(rng, need).copied().collect();
    Ok(Episode {
        task_id: task.id.clone(),
        support: task.subset(&picked[..inner_batch]),
        query: task.subset(&picked[inner_batch..]),
    })
}

fn inner_mode(config: &MetaConfig) -> Mode {
    if config.inner_dropout {
        Mode::Train
    } else {
        Mode::Eval
    }
}

/// `inner_steps` gradient steps on the support set. MAML and ANIL keep the
/// step differentiable; first-order MAML treats each inner gradient as a
/// constant. Untracked parameters are first attached to a fresh tape.
pub fn inner_adapt<L: Learner, R: Rng + ?Sized>(
    learner: &L,
    params: &ParamSet,
    support: &[L::Example],
    config: &MetaConfig,
    rng: &mut R,
) -> Result<ParamSet> {
    if config.inner_steps == 0 || config.inner_lr == 0.0 {
        return Ok(params.clone());
    }
    if support.is_empty() {
        return Err(Error::data("inner loop over an empty support set"));
    }
    let mut current = if params.tensors().all(Tensor::is_tracked) {
        params.clone()
    } else {
        params.attach(&Tape::new())
    };
    for _ in 0..config.inner_steps {
        let loss = learner.loss(&current, support, inner_mode(config), rng)?;
        let fast = current.subset(|n| config.adapts(n));
        let targets: Vec<&Tensor> = fast.tensors().collect();
        let grads: ParamSet = fast
            .names()
            .map(str::to_string)
            .zip(grad(&loss, &targets, config.algorithm.second_order())?)
            .collect();
        current = current.merged(&sgd_step(&fast, &grads, config.inner_lr)?)?;
    }
    Ok(current)
}

/// Sum over episodes of the query loss after inner adaptation.
pub fn meta_loss<L: Learner, R: Rng + ?Sized>(
    learner: &L,
    params: &ParamSet,
    episodes: &[Episode<L::Example>],
    config: &MetaConfig,
    rng: &mut R,
) -> Result<Tensor> {
    if episodes.is_empty() {
        return Err(Error::data("meta-loss over no episodes"));
    }
    let params = if params.tensors().all(Tensor::is_tracked) {
        params.clone()
    } else {
        params.attach(&Tape::new())
    };
    let mut total = Tensor::scalar(0.0);
    for ep in episodes {
        let adapted = inner_adapt(learner, &params, &ep.support, config, rng)?;
        total = total.add(&learner.loss(&adapted, &ep.query, Mode::Train, rng)?)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub meta_loss: f64,
    pub task_losses: Vec<(String, f64)>,
}

/// Gradient of the meta-loss at `params`, one tape per episode, summed in
/// episode order.
pub fn meta_gradient<L: Learner, R: Rng + ?Sized>(
    learner: &L,
    params: &ParamSet,
    episodes: &[Episode<L::Example>],
    config: &MetaConfig,
    rng: &mut R,
) -> Result<(ParamSet, StepMetrics)> {
    if episodes.is_empty() {
        return Err(Error::data("meta-gradient over no episodes"));
    }
    let base = params.detach();
    let mut sums: Vec<Vec<f64>> = base.tensors().map(|t| vec![0.0; t.numel()]).collect();
    let mut metrics = StepMetrics {
        meta_loss: 0.0,
        task_losses: Vec::with_capacity(episodes.len()),
    };
    for ep in episodes {
        let tape = Tape::new();
        let vars = base.attach(&tape);
        let adapted = inner_adapt(learner, &vars, &ep.support, config, rng)?;
        let loss = learner.loss(&adapted, &ep.query, Mode::Train, rng)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite query loss on `{}`", ep.task_id)));
        }
        let targets: Vec<&Tensor> = vars.tensors().collect();
        for (acc, g) in sums.iter_mut().zip(grad(&loss, &targets, false)?) {
            acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
        metrics.meta_loss += value;
        metrics.task_losses.push((ep.task_id.clone(), value));
    }
    let grads = base
        .iter()
        .zip(sums)
        .map(|((name, t), data)| Ok((name.to_string(), Tensor::new(t.shape().to_vec(), data)?)))
        .collect::<Result<ParamSet>>()?;
    Ok((grads, metrics))
}

#[derive(Debug, Clone)]
pub enum OuterState {
    Sgd,
    Adam(AdamState),
}

impl OuterState {
    pub fn new(params: &ParamSet, config: &MetaConfig) -> Self {
        match config.outer_optimizer {
            OuterOptimizer::Sgd => OuterState::Sgd,
            OuterOptimizer::Adam => OuterState::Adam(AdamState::new(params, AdamConfig::default())),
        }
    }
}

/// One outer update on the given episodes.
pub fn meta_update<L: Learner, R: Rng + ?Sized>(
    learner: &L,
    params: &ParamSet,
    state: &OuterState,
    episodes: &[Episode<L::Example>],
    config: &MetaConfig,
    rng: &mut R,
) -> Result<(ParamSet, OuterState, StepMetrics)> {
    let (grads, metrics) = meta_gradient(learner, params, episodes, config, rng)?;
    let lr = config.outer_lr();
    let base = params.detach();
    match state {
        OuterState::Sgd => Ok((sgd_step(&base, &grads, lr)?, OuterState::Sgd, metrics)),
        OuterState::Adam(adam) => {
            let (next, updated) = adam_step(adam, &base, &grads, lr)?;
            Ok((updated, OuterState::Adam(next), metrics))
        }
    }
}

/// Samples `meta_batch` tasks uniformly with replacement, one episode each,
/// and applies one outer update.
pub fn meta_step<L: Learner<Example = Labeled>, R: Rng + ?Sized>(
    learner: &L,
    params: &ParamSet,
    state: &OuterState,
    train_tasks: &[&Task],
    config: &MetaConfig,
    rng: &mut R,
) -> Result<(ParamSet, OuterState, StepMetrics)> {
    if train_tasks.is_empty() {
        return Err(Error::data("no meta-training tasks"));
    }
    let episodes = (0..config.meta_batch)
        .map(|_| {
            let task = train_tasks[rng.gen_range(0..train_tasks.len())];
            sample_episode(task, config.inner_batch, config.query_size, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    meta_update(learner, params, state, &episodes, config, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub meta_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_auprc: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct MetaTrainOutcome {
    pub params: ParamSet,
    pub best_val_auprc: f64,
    /// 0 when the initialization itself validated best.
    pub best_iteration: usize,
    pub initial_val_auprc: f64,
    pub log: Vec<LogEntry>,
}

/// Mean test AUPRC over the tasks and `val_sets` instance sets after
/// fine-tuning a copy of `params` on `k_val` instances of each. Instance sets
/// and fine-tuning seeds are fixed,
/// so successive validations are comparable.
pub fn meta_validate(
    params: &ParamSet,
    tasks: &[&Task],
    model: &ModelConfig,
    config: &MetaConfig,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::data("no validation tasks"));
    }
    let mut total = 0.0;
    for task in tasks {
        let k = config.k_val.min(task.partitions.train.len());
        for set in 0..config.val_sets {
            let instances = instance_set(task, k, set, config.base_seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(run_seed(config.base_seed, &task.id, k, set, 0));
            total += finetune_on_instances(params, task, &instances, model, &config.val_finetune, &mut rng)?.auprc;
        }
    }
    Ok(total / (tasks.len() * config.val_sets) as f64)
}

/// Meta-trains from `init`, validating every `val_every` iterations and
/// keeping the best-validating initialization.
pub fn meta_train<R: Rng + ?Sized>(
    init: &ParamSet,
    registry: &TaskRegistry,
    model: &ModelConfig,
    config: &MetaConfig,
    rng: &mut R,
) -> Result<MetaTrainOutcome> {
    config.validate()?;
    model.check_params(init)?;
    let train = registry.train_tasks();
    let val = registry.val_tasks();
    if train.is_empty() || val.is_empty() {
        return Err(Error::data("meta-training needs training and validation tasks"));
    }
    let learner = GgnnLearner { model: model.clone() };
    let start = Instant::now();
    let initial = meta_validate(init, &val, model, config)?;
    log::info!("initial validation AUPRC {initial:.4}");
    let mut outcome = MetaTrainOutcome {
        params: init.detach(),
        best_val_auprc: initial,
        best_iteration: 0,
        initial_val_auprc: initial,
        log: Vec::new(),
    };
    let mut params = init.detach();
    let mut state = OuterState::new(&params, config);
    let mut stale = 0;
    for iter in 1..=config.max_meta_iterations {
        let (next, next_state, metrics) = meta_step(&learner, &params, &state, &train, config, rng)?;
        params = next;
        state = next_state;
        let mut entry = LogEntry {
            iter,
            meta_loss: metrics.meta_loss,
            val_auprc: None,
            wall_ms: 0,
        };
        if iter % config.val_every == 0 {
            let score = meta_validate(&params, &val, model, config)?;
            entry.val_auprc = Some(score);
            log::info!("iteration {iter}: meta-loss {:.4}, validation AUPRC {score:.4}", metrics.meta_loss);
            if score > outcome.best_val_auprc {
                outcome.best_val_auprc = score;
                outcome.best_iteration = iter;
                outcome.params = params.clone();
                stale = 0;
            } else {
                stale += 1;
            }
        }
        entry.wall_ms = start.elapsed().as_millis() as u64;
        outcome.log.push(entry);
        if stale >= config.patience {
            break;
        }
    }
    Ok(outcome)
}
