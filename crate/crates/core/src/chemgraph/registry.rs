use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Molecule, Task, TaskType};
use crate::error::{Error, Result};

/// Disjoint, exhaustive index lists into a task's instances.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partitions {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Partitions {
    fn check(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::data(format!("partition index {i} invalid or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::data("partitions do not cover every instance"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BfCounts {
    pub b: usize,
    pub f: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistryConfig {
    pub min_instances: usize,
    pub val_counts: BfCounts,
    pub test_counts: BfCounts,
    /// Per-task train/val/test proportions.
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            min_instances: 128,
            val_counts: BfCounts { b: 10, f: 10 },
            test_counts: BfCounts { b: 10, f: 10 },
            fractions: [0.6, 0.2, 0.2],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskRegistry {
    pub tasks: BTreeMap<String, Task>,
    pub splits: Splits,
    pub min_instances: usize,
    pub seed: u64,
}

impl TaskRegistry {
    pub fn task(&self, id: &str) -> Result<&Task> {
        self.tasks
            .get(id)
            .ok_or_else(|| Error::data(format!("unknown task `{id}`")))
    }

    fn resolve(&self, ids: &[String]) -> Vec<&Task> {
        ids.iter().filter_map(|id| self.tasks.get(id)).collect()
    }

    pub fn train_tasks(&self) -> Vec<&Task> {
        self.resolve(&self.splits.train)
    }

    pub fn val_tasks(&self) -> Vec<&Task> {
        self.resolve(&self.splits.val)
    }

    pub fn test_tasks(&self) -> Vec<&Task> {
        self.resolve(&self.splits.test)
    }

    pub fn type_counts(ids: &[String], reg: &TaskRegistry) -> BTreeMap<TaskType, usize> {
        let mut counts = BTreeMap::new();
        for t in reg.resolve(ids) {
            *counts.entry(t.task_type).or_insert(0) += 1;
        }
        counts
    }

    /// Split lists are disjoint, reference known tasks, and every task's
    /// partitions are disjoint and exhaustive.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self
            .splits
            .train
            .iter()
            .chain(&self.splits.val)
            .chain(&self.splits.test)
        {
            if !self.tasks.contains_key(id) {
                return Err(Error::data(format!("split references unknown task `{id}`")));
            }
            if !seen.insert(id) {
                return Err(Error::data(format!("task `{id}` appears in two splits")));
            }
        }
        for t in self.tasks.values() {
            t.partitions
                .check(t.instances.len())
                .map_err(|e| Error::data(format!("task `{}`: {e}", t.id)))?;
        }
        Ok(())
    }
}

/// Groups molecules into tasks by label key. Instance order follows the
/// dataset order. Partitions are left empty.
pub fn tasks_from_dataset(
    molecules: &[Molecule],
    task_types: &BTreeMap<String, TaskType>,
) -> Result<Vec<Task>> {
    let mut tasks: BTreeMap<&str, Task> = BTreeMap::new();
    for m in molecules {
        for (id, &y) in &m.labels {
            let task_type = *task_types
                .get(id)
                .ok_or_else(|| Error::data(format!("no task type for `{id}`")))?;
            tasks
                .entry(id)
                .or_insert_with(|| Task {
                    id: id.clone(),
                    task_type,
                    instances: Vec::new(),
                    partitions: Partitions::default(),
                })
                .instances
                .push((m.graph.clone(), y));
        }
    }
    Ok(tasks.into_values().collect())
}

/// Class-stratified split of each class by `fractions`; index lists sorted.
fn partition(task: &Task, fractions: [f64; 3], rng: &mut ChaCha8Rng) -> Partitions {
    let mut p = Partitions::default();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = task
            .instances
            .iter()
            .enumerate()
            .filter(|(_, (_, y))| *y == class)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(rng);
        let n = idx.len() as f64;
        let n_train = (n * fractions[0]).round() as usize;
        let n_val = ((n * fractions[1]).round() as usize).min(idx.len() - n_train);
        p.train.extend_from_slice(&idx[..n_train]);
        p.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        p.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    p.train.sort_unstable();
    p.val.sort_unstable();
    p.test.sort_unstable();
    p
}

/// Filters small and single-class tasks, sends every A/T/P task to the test
/// split, samples the configured numbers of B and F tasks into validation and
/// test, and leaves the remaining B/F tasks for training.
pub fn build_registry(tasks: Vec<Task>, config: &RegistryConfig) -> Result<TaskRegistry> {
    if config.min_instances == 0 {
        return Err(Error::config("min_instances must be at least 1"));
    }
    let total: f64 = config.fractions.iter().sum();
    if config.fractions.iter().any(|&f| f < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::config("partition fractions must be non-negative and sum to 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut kept: BTreeMap<String, Task> = BTreeMap::new();
    for task in tasks {
        if task.instances.len() < config.min_instances {
            continue;
        }
        if !task.has_both_classes() {
            log::warn!("dropping single-class task `{}`", task.id);
            continue;
        }
        kept.insert(task.id.clone(), task);
    }

    let mut splits = Splits::default();
    let ids_of = |ty: TaskType| -> Vec<String> {
        kept.values()
            .filter(|t| t.task_type == ty)
            .map(|t| t.id.clone())
            .collect()
    };
    for ty in [TaskType::A, TaskType::T, TaskType::P] {
        splits.test.extend(ids_of(ty));
    }
    for (ty, n_val, n_test) in [
        (TaskType::B, config.val_counts.b, config.test_counts.b),
        (TaskType::F, config.val_counts.f, config.test_counts.f),
    ] {
        let mut ids = ids_of(ty);
        if ids.len() < n_val + n_test {
            return Err(Error::data(format!(
                "{} {ty} tasks available, {} requested for validation and test",
                ids.len(),
                n_val + n_test
            )));
        }
        ids.shuffle(&mut rng);
        splits.val.extend_from_slice(&ids[..n_val]);
        splits.test.extend_from_slice(&ids[n_val..n_val + n_test]);
        splits.train.extend_from_slice(&ids[n_val + n_test..]);
    }
    splits.train.sort();
    splits.val.sort();
    splits.test.sort();

    for task in kept.values_mut() {
        task.partitions = partition(task, config.fractions, &mut rng);
    }
    let registry = TaskRegistry {
        tasks: kept,
        splits,
        min_instances: config.min_instances,
        seed: config.seed,
    };
    registry.validate()?;
    Ok(registry)
}

#[derive(Serialize, Deserialize)]
struct RegistryFile {
    splits: Splits,
    partitions: BTreeMap<String, Partitions>,
    min_instances: usize,
    seed: u64,
    #[serde(default)]
    task_types: BTreeMap<String, TaskType>,
}

pub fn save_registry(path: impl AsRef<Path>, registry: &TaskRegistry) -> Result<()> {
    let file = RegistryFile {
        splits: registry.splits.clone(),
        partitions: registry
            .tasks
            .iter()
            .map(|(id, t)| (id.clone(), t.partitions.clone()))
            .collect(),
        min_instances: registry.min_instances,
        seed: registry.seed,
        task_types: registry
            .tasks
            .iter()
            .map(|(id, t)| (id.clone(), t.task_type))
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &file)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Rebuilds a registry from its file and the dataset it was built from.
pub fn load_registry(path: impl AsRef<Path>, molecules: &[Molecule]) -> Result<TaskRegistry> {
    let file: RegistryFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let tasks = tasks_from_dataset(molecules, &file.task_types)?;
    let mut kept = BTreeMap::new();
    for mut task in tasks {
        if let Some(p) = file.partitions.get(&task.id) {
            task.partitions = p.clone();
            kept.insert(task.id.clone(), task);
        }
    }
    if let Some(missing) = file.partitions.keys().find(|id| !kept.contains_key(*id)) {
        return Err(Error::data(format!("registry task `{missing}` not in dataset")));
    }
    let registry = TaskRegistry {
        tasks: kept,
        splits: file.splits,
        min_instances: file.min_instances,
        seed: file.seed,
    };
    registry.validate()?;
    Ok(registry)
}
