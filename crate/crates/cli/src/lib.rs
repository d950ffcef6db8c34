//! `metagraph` command line: synthesize tasks, pre-train the multitask
//! baseline, meta-train an initialization, and benchmark initializations.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{resolve, RunConfig, SEED_ENV};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "metagraph", version, about = "Meta-learning for few-shot graph classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set meta.inner_lr=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Global seed (falls back to the config, then METAGRAPH_SEED).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace existing outputs instead of refusing.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and task registry.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the multitask baseline on training and validation tasks.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory holding dataset.jsonl and registry.json.
        #[arg(long)]
        data: PathBuf,
    },
    /// Meta-train a single-output initialization.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// maml, fomaml or anil.
        #[arg(long)]
        algo: Option<String>,
    },
    /// Fine-tune every method on every test task and report ranks.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated `random` or `NAME=CHECKPOINT` entries.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
        /// Comma-separated fine-tuning set sizes.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// Worker threads.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn load(common: &Common) -> CliResult<RunConfig> {
    let env = std::env::var(SEED_ENV).ok();
    resolve(common.config.as_deref(), &common.overrides, common.seed, env.as_deref())
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { common } => {
            let config = load(&common)?;
            commands::synth(&config, &common.out, common.overwrite)?;
        }
        Command::Pretrain { common, data } => {
            let config = load(&common)?;
            commands::pretrain(&config, &data, &common.out, common.overwrite)?;
        }
        Command::MetaTrain { common, data, algo } => {
            let mut config = load(&common)?;
            if let Some(a) = algo {
                config.meta.algorithm = commands::parse_algorithm(&a)?;
            }
            commands::meta(&config, &data, &common.out, common.overwrite)?;
        }
        Command::Benchmark {
            common,
            data,
            methods,
            ks,
            jobs,
        } => {
            let mut config = load(&common)?;
            if let Some(ks) = ks {
                if ks.is_empty() || ks.contains(&0) {
                    return Err(CliError::Usage("--ks needs positive sizes".into()));
                }
                config.benchmark.ks = ks;
            }
            if let Some(j) = jobs {
                config.benchmark.jobs = j;
            }
            commands::benchmark(&config, &data, &methods, &common.out, common.overwrite)?;
        }
    }
    Ok(())
}
