//! Run configuration: one JSON document covering every stage, with defaults
//! for anything omitted and `key.path=value` overrides.

use std::path::Path;

use metagraph::baselines::PretrainConfig;
use metagraph::chemgraph::{RegistryConfig, SynthSpec};
use metagraph::evalbench::BenchmarkConfig;
use metagraph::ggnn::ModelConfig;
use metagraph::metalearn::MetaConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "METAGRAPH_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; every stage derives its own streams from it.
    pub seed: u64,
    pub synth: SynthSpec,
    pub registry: RegistryConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub meta: MetaConfig,
    pub benchmark: BenchmarkConfig,
}

impl RunConfig {
    /// Copies the global seed into the stage configs that carry their own.
    fn propagate_seed(&mut self) {
        self.registry.seed = self.seed;
        self.meta.base_seed = self.seed;
        self.benchmark.base_seed = self.seed;
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.meta.validate()?;
        self.benchmark.finetune.validate()?;
        if self.model.output_dim != 1 {
            return Err(CliError::Config("model.output_dim must be 1; multitask heads are sized automatically".into()));
        }
        Ok(())
    }
}

/// Sets `path` (dot-separated) in `root`, creating objects on the way. The
/// value is parsed as JSON when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override key `{key}`")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let map = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("`{key}`: `{part}` is inside a non-object")))?;
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    node.as_object_mut()
        .ok_or_else(|| CliError::Config(format!("`{key}` does not name an object field")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Loads `path` (or an empty document), applies overrides, and resolves the
/// seed: `--seed`, then the document's `seed`, then `METAGRAPH_SEED`, then 0.
pub fn resolve(
    path: Option<&Path>,
    overrides: &[String],
    seed_flag: Option<u64>,
    seed_env: Option<&str>,
) -> CliResult<RunConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config `{}`: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("`{}`: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !doc.is_object() {
        return Err(CliError::Config("config must be a JSON object".into()));
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let has_seed = doc.get("seed").is_some();
    let mut config: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(seed) = seed_flag {
        config.seed = seed;
    } else if !has_seed {
        if let Some(raw) = seed_env {
            config.seed = raw
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
        }
    }
    config.propagate_seed();
    config.validate()?;
    Ok(config)
}
