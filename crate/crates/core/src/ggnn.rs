//! Gated graph neural network: per-layer edge-type transforms and unshared GRU
//! updates, sum readout, one tanh hidden layer and a linear head. Every
//! forward pass takes its weights from an explicit [`ParamSet`], so adapted
//! fast weights can be swapped in freely.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chemgraph::{MolecularGraph, NUM_ATOM_FEATURES, NUM_EDGE_TYPES};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub feature_width: usize,
    pub hidden_width: usize,
    pub num_edge_types: usize,
    pub dropout: f64,
    pub output_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 7,
            feature_width: NUM_ATOM_FEATURES,
            hidden_width: 1024,
            num_edge_types: NUM_EDGE_TYPES,
            dropout: 0.2,
            output_dim: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.feature_width == 0
            || self.hidden_width == 0
            || self.num_edge_types == 0
            || self.output_dim == 0
        {
            return Err(Error::config("model sizes must all be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Expected `(name, shape)` for every parameter, in canonical order.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        let f = self.feature_width;
        let mut out = Vec::new();
        for t in 0..self.layers {
            for e in 0..self.num_edge_types {
                out.push((format!("layer{t}.A{e}"), vec![f, f]));
            }
            out.push((format!("layer{t}.A_self"), vec![f, f]));
            for w in ["W_z", "W_r", "W_h", "U_z", "U_r", "U_h"] {
                out.push((format!("layer{t}.gru.{w}"), vec![f, f]));
            }
            for b in ["b_z", "b_r", "b_h"] {
                out.push((format!("layer{t}.gru.{b}"), vec![f]));
            }
        }
        out.push(("mlp.0.W".into(), vec![f, self.hidden_width]));
        out.push(("mlp.0.b".into(), vec![self.hidden_width]));
        out.push(("head.W".into(), vec![self.hidden_width, self.output_dim]));
        out.push(("head.b".into(), vec![self.output_dim]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.schema()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Checks names and shapes, listing everything missing or malformed.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let mut problems = Vec::new();
        for (name, shape) in self.schema() {
            match params.get(&name) {
                None => problems.push(format!("missing `{name}`")),
                Some(t) if t.shape() != shape.as_slice() => {
                    problems.push(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape()))
                }
                Some(_) => {}
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Params(problems.join("; ")))
        }
    }
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

/// Glorot-uniform weights and zero biases, drawn in schema order.
pub fn init_params<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ParamSet> {
    config.validate()?;
    let mut params = ParamSet::new();
    for (name, shape) in config.schema() {
        params.insert(name, fresh_tensor(&shape, rng)?);
    }
    Ok(params)
}

/// Glorot-uniform for matrices, zeros for vectors.
pub fn fresh_tensor<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    let data = if shape.len() == 2 {
        let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
        (0..numel).map(|_| rng.gen_range(-limit..=limit)).collect()
    } else {
        vec![0.0; numel]
    };
    Ok(Tensor::new(shape.to_vec(), data)?)
}

/// The model configuration matching `params`' head width.
pub fn config_for(params: &ParamSet, model: &ModelConfig) -> Result<ModelConfig> {
    let out = params.require("head.b")?.numel();
    Ok(ModelConfig {
        output_dim: out,
        ..model.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Several graphs packed as one block-diagonal graph.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    num_nodes: usize,
    num_graphs: usize,
    features: Tensor,
    /// Per edge type: message sources and receivers, both directions.
    edges_by_type: Vec<Option<(Arc<Vec<usize>>, Arc<Vec<usize>>)>>,
    graph_of_node: Arc<Vec<usize>>,
}

impl GraphBatch {
    pub fn new(graphs: &[&MolecularGraph], config: &ModelConfig) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::data("empty graph batch"));
        }
        let mut features = Vec::new();
        let mut graph_of_node = Vec::new();
        let mut lists = vec![(Vec::new(), Vec::new()); config.num_edge_types];
        let mut offset = 0;
        for (gi, g) in graphs.iter().enumerate() {
            if g.feature_width() != config.feature_width {
                return Err(Error::data(format!(
                    "graph {} has feature width {}, model expects {}",
                    g.id.as_deref().unwrap_or("?"),
                    g.feature_width(),
                    config.feature_width
                )));
            }
            features.extend_from_slice(g.features());
            graph_of_node.extend(std::iter::repeat(gi).take(g.num_nodes()));
            for e in g.edges() {
                let k = e.kind.index();
                let (src, dst) = lists.get_mut(k).ok_or_else(|| {
                    Error::data(format!(
                        "edge type {k} but the model has {} edge types",
                        config.num_edge_types
                    ))
                })?;
                src.extend([offset + e.v, offset + e.u]);
                dst.extend([offset + e.u, offset + e.v]);
            }
            offset += g.num_nodes();
        }
        Ok(Self {
            num_nodes: offset,
            num_graphs: graphs.len(),
            features: Tensor::matrix(offset, config.feature_width, features)?,
            edges_by_type: lists
                .into_iter()
                .map(|(s, d)| (!s.is_empty()).then(|| (Arc::new(s), Arc::new(d))))
                .collect(),
            graph_of_node: Arc::new(graph_of_node),
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.num_graphs
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }
}

fn layer_param<'a>(params: &'a ParamSet, layer: usize, name: &str) -> Result<&'a Tensor> {
    params.require(&format!("layer{layer}.{name}"))
}

/// `m_v = A_self h_v + sum over neighbours w of A_e(vw) h_w`.
pub fn batch_messages(batch: &GraphBatch, h: &Tensor, params: &ParamSet, layer: usize) -> Result<Tensor> {
    let mut m = h.matmul(&layer_param(params, layer, "A_self")?.transpose()?)?;
    for (e, slot) in batch.edges_by_type.iter().enumerate() {
        let Some((src, dst)) = slot else { continue };
        let projected = h.matmul(&layer_param(params, layer, &format!("A{e}"))?.transpose()?)?;
        let incoming = projected
            .gather_rows_shared(src.clone())?
            .segment_sum_shared(dst.clone(), batch.num_nodes)?;
        m = m.add(&incoming)?;
    }
    Ok(m)
}

fn gru(h: &Tensor, m: &Tensor, params: &ParamSet, layer: usize) -> Result<Tensor> {
    let rows = h.shape()[0];
    let p = |name: &str| layer_param(params, layer, &format!("gru.{name}"));
    let gate = |w: &str, u: &str, b: &str, hidden: &Tensor| -> Result<Tensor> {
        let bias = p(b)?.expand_axis(0, rows)?;
        Ok(m.matmul(p(w)?)?.add(&hidden.matmul(p(u)?)?)?.add(&bias)?)
    };
    let z = gate("W_z", "U_z", "b_z", h)?.sigmoid()?;
    let r = gate("W_r", "U_r", "b_r", h)?.sigmoid()?;
    let candidate = gate("W_h", "U_h", "b_h", &r.mul(h)?)?.tanh()?;
    // (1 - z) h + z c  ==  h + z (c - h)
    Ok(h.add(&z.mul(&candidate.sub(h)?)?)?)
}

/// One message-passing layer (messages then GRU update) on a batch.
pub fn batch_message_pass(batch: &GraphBatch, h: &Tensor, params: &ParamSet, layer: usize) -> Result<Tensor> {
    let m = batch_messages(batch, h, params, layer)?;
    gru(h, &m, params, layer)
}

pub fn message_pass(
    g: &MolecularGraph,
    h: &Tensor,
    params: &ParamSet,
    config: &ModelConfig,
    layer: usize,
) -> Result<Tensor> {
    if layer >= config.layers {
        return Err(Error::config(format!("layer {layer} of {}", config.layers)));
    }
    if h.shape() != [g.num_nodes(), config.feature_width] {
        return Err(Error::data(format!(
            "hidden state shape {:?}, expected [{}, {}]",
            h.shape(),
            g.num_nodes(),
            config.feature_width
        )));
    }
    let batch = GraphBatch::new(&[g], config)?;
    batch_message_pass(&batch, h, params, layer)
}

/// Pooled graph representations `[graphs x F]` after all layers.
fn readout<R: Rng + ?Sized>(
    batch: &GraphBatch,
    params: &ParamSet,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    let training = mode == Mode::Train;
    let mut h = batch.features.clone();
    for layer in 0..config.layers {
        h = batch_message_pass(batch, &h, params, layer)?;
        h = h.dropout(config.dropout, training, rng)?;
    }
    Ok(h.segment_sum_shared(batch.graph_of_node.clone(), batch.num_graphs)?)
}

fn hidden<R: Rng + ?Sized>(
    batch: &GraphBatch,
    params: &ParamSet,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    config.check_params(params)?;
    let pooled = readout(batch, params, config, mode, rng)?;
    let bias = params.require("mlp.0.b")?.expand_axis(0, batch.num_graphs)?;
    Ok(pooled.matmul(params.require("mlp.0.W")?)?.add(&bias)?.tanh()?)
}

/// Logits `[graphs x output_dim]`.
pub fn forward_batch<R: Rng + ?Sized>(
    batch: &GraphBatch,
    params: &ParamSet,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    let act = hidden(batch, params, config, mode, rng)?
        .dropout(config.dropout, mode == Mode::Train, rng)?;
    let bias = params.require("head.b")?.expand_axis(0, batch.num_graphs)?;
    Ok(act.matmul(params.require("head.W")?)?.add(&bias)?)
}

/// Logits `[output_dim]` for a single graph.
pub fn forward<R: Rng + ?Sized>(
    g: &MolecularGraph,
    params: &ParamSet,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    let batch = GraphBatch::new(&[g], config)?;
    Ok(forward_batch(&batch, params, config, mode, rng)?.reshape([config.output_dim])?)
}

/// Sum-pooled node states `[graphs x F]` in eval mode.
pub fn pooled_batch(batch: &GraphBatch, params: &ParamSet, config: &ModelConfig) -> Result<Tensor> {
    config.check_params(params)?;
    readout(batch, params, config, Mode::Eval, &mut rand::rngs::mock::StepRng::new(0, 0))
}

/// Hidden-layer activations `[graphs x H]` in eval mode.
pub fn penultimate_batch(batch: &GraphBatch, params: &ParamSet, config: &ModelConfig) -> Result<Tensor> {
    hidden(batch, params, config, Mode::Eval, &mut rand::rngs::mock::StepRng::new(0, 0))
}

pub fn penultimate_activations(g: &MolecularGraph, params: &ParamSet, config: &ModelConfig) -> Result<Tensor> {
    let batch = GraphBatch::new(&[g], config)?;
    Ok(penultimate_batch(&batch, params, config)?.reshape([config.hidden_width])?)
}

/// Eval-mode logits for the first output column, one per graph, evaluated in
/// chunks of `chunk` graphs.
pub fn predict_logits(
    graphs: &[&MolecularGraph],
    params: &ParamSet,
    config: &ModelConfig,
    chunk: usize,
) -> Result<Vec<f64>> {
    let params = params.detach();
    let mut out = Vec::with_capacity(graphs.len());
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    for part in graphs.chunks(chunk.max(1)) {
        let batch = GraphBatch::new(part, config)?;
        let logits = forward_batch(&batch, &params, config, Mode::Eval, &mut rng)?;
        out.extend(logits.data().chunks(config.output_dim).map(|row| row[0]));
    }
    Ok(out)
}

pub fn predict_proba(
    graphs: &[&MolecularGraph],
    params: &ParamSet,
    config: &ModelConfig,
    chunk: usize,
) -> Result<Vec<f64>> {
    Ok(predict_logits(graphs, params, config, chunk)?
        .into_iter()
        .map(|z| 1.0 / (1.0 + (-z).exp()))
        .collect())
}
