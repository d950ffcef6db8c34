//! Checkpoint files: an 8-byte magic, a little-endian u32 manifest length, the
//! JSON manifest, then every tensor as little-endian f32 in manifest order.
//! Training runs in f64; values round to f32 on save.

use std::path::Path;

use metagraph::ggnn::ModelConfig;
use metagraph::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"MGRAPHCK";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// In f32 elements from the start of the payload.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    /// `multitask` or the meta-learning algorithm name.
    pub kind: String,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Task id per output column of a multitask head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<String>>,
    pub seed: u64,
}

pub fn encode(params: &ParamSet, kind: &str, model: &ModelConfig, columns: Option<Vec<String>>, seed: u64) -> CliResult<Vec<u8>> {
    model.check_params(params)?;
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel(),
        });
        offset += t.numel();
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        model: model.clone(),
        tensors,
        columns,
        seed,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> CliResult<(ParamSet, Manifest)> {
    let bad = |msg: String| CliError::Data(format!("checkpoint: {msg}"));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(bad(format!("manifest needs {len} bytes, file has {}", body.len())));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(bad(format!(
            "schema version {} unsupported (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let payload = &body[len..];
    let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if payload.len() != 4 * total {
        return Err(bad(format!("payload has {} bytes, manifest expects {}", payload.len(), 4 * total)));
    }
    let mut expected_offset = 0;
    let mut params = ParamSet::new();
    for entry in &manifest.tensors {
        if entry.offset != expected_offset {
            return Err(bad(format!("`{}` starts at {}, expected {expected_offset}", entry.name, entry.offset)));
        }
        if entry.shape.iter().product::<usize>() != entry.len {
            return Err(bad(format!("`{}` has shape {:?} but length {}", entry.name, entry.shape, entry.len)));
        }
        let data = payload[4 * entry.offset..4 * (entry.offset + entry.len)]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("four bytes"))))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data).map_err(|e| bad(e.to_string()))?;
        if params.insert(entry.name.clone(), tensor).is_some() {
            return Err(bad(format!("`{}` appears twice", entry.name)));
        }
        expected_offset += entry.len;
    }
    manifest.model.check_params(&params).map_err(|e| bad(e.to_string()))?;
    Ok((params, manifest))
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamSet,
    kind: &str,
    model: &ModelConfig,
    columns: Option<Vec<String>>,
    seed: u64,
) -> CliResult<()> {
    std::fs::write(path, encode(params, kind, model, columns, seed)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> CliResult<(ParamSet, Manifest)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("checkpoint `{}`: {e}", path.display())))?;
    decode(&bytes).map_err(|e| match e {
        CliError::Data(msg) => CliError::Data(format!("`{}`: {msg}", path.display())),
        other => other,
    })
}
