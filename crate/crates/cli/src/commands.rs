use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use metagraph::baselines::pretrain_multitask;
use metagraph::chemgraph::{build_registry, load_dataset, load_registry, save_dataset, save_registry, synthesize_tasks, TaskRegistry, TaskType};
use metagraph::evalbench::{aggregate, rank_chart_svg, run_benchmark, write_rank_csv, write_records, write_report_json, Method, MethodSpec};
use metagraph::ggnn::{init_params, ModelConfig};
use metagraph::metalearn::{meta_train, Algorithm};
use metagraph::seed;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const REGISTRY_FILE: &str = "registry.json";
pub const CONFIG_FILE: &str = "config.json";
pub const RECORDS_FILE: &str = "records.csv";

fn stage_rng(config: &RunConfig, stage: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[seed::hash_str(stage)]))
}

/// Refuses to clobber existing outputs unless `overwrite` is set.
fn prepare_out(dir: &Path, outputs: &[&str], overwrite: bool) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    if !overwrite {
        if let Some(existing) = outputs.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
            return Err(CliError::Usage(format!("`{}` exists; pass --overwrite to replace it", existing.display())));
        }
    }
    Ok(())
}

fn persist_config(dir: &Path, name: &str, config: &RunConfig) -> CliResult<()> {
    let text = serde_json::to_string_pretty(config).map_err(|e| CliError::Data(e.to_string()))?;
    eprintln!("resolved configuration:\n{text}");
    fs::write(dir.join(name), text + "\n")?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| CliError::Data(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_data(dir: &Path) -> CliResult<TaskRegistry> {
    let dataset = dir.join(DATASET_FILE);
    let registry = dir.join(REGISTRY_FILE);
    for p in [&dataset, &registry] {
        if !p.exists() {
            return Err(CliError::Data(format!("`{}` not found; run `synth` first", p.display())));
        }
    }
    let molecules = load_dataset(&dataset)?;
    Ok(load_registry(&registry, &molecules)?)
}

/// Task counts per type for each split.
pub fn split_summary(registry: &TaskRegistry) -> String {
    let mut out = String::from("split   A    T    P    B    F\n");
    for (name, ids) in [
        ("train", &registry.splits.train),
        ("val", &registry.splits.val),
        ("test", &registry.splits.test),
    ] {
        let counts: BTreeMap<TaskType, usize> = TaskRegistry::type_counts(ids, registry);
        out.push_str(&format!("{name:<6}"));
        for ty in [TaskType::A, TaskType::T, TaskType::P, TaskType::B, TaskType::F] {
            out.push_str(&format!("{:>4} ", counts.get(&ty).copied().unwrap_or(0)));
        }
        out.push('\n');
    }
    out
}

pub fn synth(config: &RunConfig, out: &Path, overwrite: bool) -> CliResult<TaskRegistry> {
    prepare_out(out, &[DATASET_FILE, REGISTRY_FILE], overwrite)?;
    let data = synthesize_tasks(&config.synth, &mut stage_rng(config, "synth"))?;
    let registry = build_registry(data.tasks()?, &config.registry)?;
    save_dataset(out.join(DATASET_FILE), &data.molecules)?;
    save_registry(out.join(REGISTRY_FILE), &registry)?;
    persist_config(out, CONFIG_FILE, config)?;
    print!("{}", split_summary(&registry));
    Ok(registry)
}

pub fn pretrain(config: &RunConfig, data: &Path, out: &Path, overwrite: bool) -> CliResult<PathBuf> {
    let ckpt = "pretrain.ckpt";
    prepare_out(out, &[ckpt, "pretrain_log.jsonl"], overwrite)?;
    let registry = load_data(data)?;
    let tasks: Vec<_> = registry.train_tasks().into_iter().chain(registry.val_tasks()).collect();
    let result = pretrain_multitask(&tasks, &config.model, &config.pretrain, &mut stage_rng(config, "pretrain"))?;
    let path = out.join(ckpt);
    save_checkpoint(&path, &result.params, "multitask", &result.model, Some(result.columns), config.seed)?;
    write_jsonl(&out.join("pretrain_log.jsonl"), &result.log)?;
    persist_config(out, "pretrain_config.json", config)?;
    log::info!("best epoch {}; wrote {}", result.best_epoch, path.display());
    Ok(path)
}

pub fn meta(config: &RunConfig, data: &Path, out: &Path, overwrite: bool) -> CliResult<PathBuf> {
    let algo = config.meta.algorithm;
    let ckpt = format!("{algo}.ckpt");
    let log_file = format!("{algo}_log.jsonl");
    prepare_out(out, &[&ckpt, &log_file], overwrite)?;
    let registry = load_data(data)?;
    let init = init_params(&config.model, &mut stage_rng(config, "init"))?;
    let start = Instant::now();
    let result = meta_train(&init, &registry, &config.model, &config.meta, &mut stage_rng(config, algo.name()))?;
    let path = out.join(&ckpt);
    save_checkpoint(&path, &result.params, algo.name(), &config.model, None, config.seed)?;
    write_jsonl(&out.join(&log_file), &result.log)?;
    persist_config(out, &format!("{algo}_config.json"), config)?;
    log::info!(
        "{algo}: best validation AUPRC {:.4} at iteration {} ({:.1}s); wrote {}",
        result.best_val_auprc,
        result.best_iteration,
        start.elapsed().as_secs_f64(),
        path.display()
    );
    Ok(path)
}

/// One `--methods` entry: `random`, or `NAME=CHECKPOINT`. Names
/// `finetune-top`, `finetune-all` and `knn` take a multitask checkpoint; any
/// other name fine-tunes the checkpoint's parameters directly.
pub fn parse_method(entry: &str, model: &ModelConfig) -> CliResult<MethodSpec> {
    if entry == "random" {
        return Ok(MethodSpec::new("random", Method::RandomInit));
    }
    let (name, path) = entry
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("method `{entry}` needs NAME=CHECKPOINT (or `random`)")))?;
    let path = Path::new(path);
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint `{}` for method `{name}` not found", path.display())));
    }
    let (params, manifest) = load_checkpoint(path)?;
    let body = |m: &ModelConfig| ModelConfig { output_dim: 1, ..m.clone() };
    if body(&manifest.model) != body(model) {
        return Err(CliError::Config(format!(
            "checkpoint `{}` was trained with {:?}, config has {:?}",
            path.display(),
            manifest.model,
            model
        )));
    }
    let method = match name {
        "finetune-top" => Method::FinetuneTop(params),
        "finetune-all" => Method::FinetuneAll(params),
        "knn" => Method::Knn { params, neighbors: 3 },
        _ if manifest.model.output_dim == 1 => Method::Finetune(params),
        _ => {
            return Err(CliError::Config(format!(
                "method `{name}` needs a single-output checkpoint; `{}` has {} outputs",
                path.display(),
                manifest.model.output_dim
            )))
        }
    };
    Ok(MethodSpec::new(name, method))
}

pub fn benchmark(config: &RunConfig, data: &Path, methods: &[String], out: &Path, overwrite: bool) -> CliResult<()> {
    let outputs = [RECORDS_FILE, "report.json", "ranks.csv", "ranks.svg"];
    prepare_out(out, &outputs, overwrite)?;
    let specs = methods
        .iter()
        .map(|m| parse_method(m, &config.model))
        .collect::<CliResult<Vec<_>>>()?;
    if specs.is_empty() {
        return Err(CliError::Usage("no methods given".into()));
    }
    let registry = load_data(data)?;
    let records = run_benchmark(&specs, &registry.test_tasks(), &config.model, &config.benchmark)?;
    write_records(File::create(out.join(RECORDS_FILE))?, &records)?;
    let report = aggregate(&records)?;
    write_report_json(File::create(out.join("report.json"))?, &report)?;
    write_rank_csv(File::create(out.join("ranks.csv"))?, &report)?;
    fs::write(out.join("ranks.svg"), rank_chart_svg(&report))?;
    persist_config(out, "benchmark_config.json", config)?;
    log::info!("{} records written to {}", records.len(), out.display());
    Ok(())
}

pub fn parse_algorithm(s: &str) -> CliResult<Algorithm> {
    s.parse().map_err(|e: metagraph::Error| CliError::Usage(e.to_string()))
}
