use std::io::{Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::finetune::{check_task, finetune_on_instances, sample_instances, FinetuneConfig};
use super::auprc;
use crate::baselines::{finetune_all, finetune_top, knn_predict};
use crate::chemgraph::{Task, TaskType};
use crate::error::{Error, Result};
use crate::ggnn::{init_params, ModelConfig};
use crate::params::ParamSet;
use crate::seed;

/// Where a method's starting point comes from.
#[derive(Debug, Clone)]
pub enum Method {
    /// Fine-tune every parameter from a given single-output initialization.
    Finetune(ParamSet),
    /// Fine-tune from a fresh Glorot initialization drawn per repeat.
    RandomInit,
    FinetuneTop(ParamSet),
    FinetuneAll(ParamSet),
    Knn { params: ParamSet, neighbors: usize },
}

#[derive(Debug, Clone)]
pub struct MethodSpec {
    pub name: String,
    pub method: Method,
}

impl MethodSpec {
    pub fn new(name: impl Into<String>, method: Method) -> Self {
        Self {
            name: name.into(),
            method,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub ks: Vec<usize>,
    pub instance_sets: usize,
    pub seeds: usize,
    pub base_seed: u64,
    pub finetune: FinetuneConfig,
    /// Worker threads; 1 runs everything inline.
    pub jobs: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            ks: vec![16, 32, 64, 128, 256],
            instance_sets: 5,
            seeds: 5,
            base_seed: 0,
            finetune: FinetuneConfig::default(),
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub task: String,
    pub task_type: TaskType,
    pub k: usize,
    pub instance_set: usize,
    pub seed: usize,
    pub auprc: f64,
}

/// Seed for the `k` instances of one instance set; shared by all methods.
pub fn instance_seed(base: u64, task: &str, k: usize, set: usize) -> u64 {
    seed::derive(base, &[seed::hash_str(task), k as u64, set as u64, 0])
}

/// Seed for one training run; shared by all methods.
pub fn run_seed(base: u64, task: &str, k: usize, set: usize, repeat: usize) -> u64 {
    seed::derive(base, &[seed::hash_str(task), k as u64, set as u64, repeat as u64, 1])
}

/// The fine-tuning instance indices used for `(task, k, set)`.
pub fn instance_set(task: &Task, k: usize, set: usize, base: u64) -> Result<Vec<usize>> {
    sample_instances(task, k, &mut ChaCha8Rng::seed_from_u64(instance_seed(base, &task.id, k, set)))
}

/// AUPRC of one method on one `(task, k, instance set, seed)` cell.
pub fn evaluate_cell(
    method: &Method,
    task: &Task,
    instances: &[usize],
    repeat_seed: u64,
    model: &ModelConfig,
    config: &FinetuneConfig,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(repeat_seed);
    let single = ModelConfig {
        output_dim: 1,
        ..model.clone()
    };
    match method {
        Method::Finetune(init) => {
            Ok(finetune_on_instances(init, task, instances, &single, config, &mut rng)?.auprc)
        }
        Method::RandomInit => {
            let mut init_rng = ChaCha8Rng::seed_from_u64(seed::derive(repeat_seed, &[2]));
            let init = init_params(&single, &mut init_rng)?;
            Ok(finetune_on_instances(&init, task, instances, &single, config, &mut rng)?.auprc)
        }
        Method::FinetuneTop(p) => Ok(finetune_top(p, model, task, instances, config, &mut rng)?.auprc),
        Method::FinetuneAll(p) => Ok(finetune_all(p, model, task, instances, config, &mut rng)?.auprc),
        Method::Knn { params, neighbors } => {
            let scores = knn_predict(params, model, task, instances, *neighbors)?;
            let labels: Vec<u8> = task.partitions.test.iter().map(|&i| task.instances[i].1).collect();
            auprc(&scores, &labels)
        }
    }
}

struct Cell<'a> {
    task: &'a Task,
    k: usize,
    set: usize,
    instances: Vec<usize>,
}

/// Every method on every task, k, instance set and seed. Instance sets and
/// training seeds depend only on `(task, k, set, seed)`, so all methods see
/// the same data. Infeasible task/k pairs are skipped with a warning.
pub fn run_benchmark(
    methods: &[MethodSpec],
    tasks: &[&Task],
    model: &ModelConfig,
    config: &BenchmarkConfig,
) -> Result<Vec<EvalRecord>> {
    if methods.is_empty() {
        return Err(Error::config("no methods to benchmark"));
    }
    config.finetune.validate()?;
    let mut cells = Vec::new();
    for task in tasks {
        if let Err(e) = check_task(task) {
            log::warn!("skipping task `{}`: {e}", task.id);
            continue;
        }
        for &k in &config.ks {
            if task.partitions.train.len() < k {
                log::warn!(
                    "skipping task `{}` at k={k}: only {} training instances",
                    task.id,
                    task.partitions.train.len()
                );
                continue;
            }
            for set in 0..config.instance_sets {
                let instances = instance_set(task, k, set, config.base_seed)?;
                cells.push(Cell {
                    task,
                    k,
                    set,
                    instances,
                });
            }
        }
    }

    let jobs: Vec<(usize, usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..methods.len()).flat_map(move |m| (0..config.seeds).map(move |s| (c, m, s))))
        .collect();
    let run = |&(c, m, s): &(usize, usize, usize)| -> Result<EvalRecord> {
        let cell = &cells[c];
        let spec = &methods[m];
        let repeat = run_seed(config.base_seed, &cell.task.id, cell.k, cell.set, s);
        let score = evaluate_cell(&spec.method, cell.task, &cell.instances, repeat, model, &config.finetune)
            .map_err(|e| Error::data(format!("{} on `{}` k={}: {e}", spec.name, cell.task.id, cell.k)))?;
        Ok(EvalRecord {
            method: spec.name.clone(),
            task: cell.task.id.clone(),
            task_type: cell.task.task_type,
            k: cell.k,
            instance_set: cell.set,
            seed: s,
            auprc: score,
        })
    };

    let workers = config.jobs.max(1).min(jobs.len().max(1));
    if workers == 1 {
        return jobs.iter().map(run).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<EvalRecord>>>> =
        Mutex::new(jobs.iter().map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = run(&jobs[i]);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

pub const RECORD_HEADER: &str = "method,task,task_type,k,instance_set,seed,auprc";

pub fn write_records<W: Write>(writer: W, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r).map_err(|e| Error::data(e.to_string()))?;
    }
    if records.is_empty() {
        w.write_record(RECORD_HEADER.split(','))
            .map_err(|e| Error::data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(reader: R) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::data(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != RECORD_HEADER {
        return Err(Error::data(format!("unexpected records header `{}`", header.join(","))));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| Error::data(format!("record {}: {e}", i + 1))))
        .collect()
}
