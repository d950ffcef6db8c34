use std::sync::{Arc, Mutex};

use super::ops::{backward, Op};
use super::{NodeRef, Tensor, TensorError, TensorResult};

/// A recorded value: storage plus the node id that produced it, without a
/// handle back to the tape (nodes never own their tape).
#[derive(Clone)]
pub(crate) struct Saved {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    id: Option<usize>,
}

impl Saved {
    fn of(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: Arc::clone(t.data_arc()),
            id: t.node().map(|n| n.id),
        }
    }

    fn restore(&self, tape: &Tape, attached: bool) -> Tensor {
        let t = Tensor::from_parts(self.shape.clone(), Arc::clone(&self.data));
        match (attached, self.id) {
            (true, Some(id)) => t.with_node(NodeRef {
                tape: tape.clone(),
                id,
            }),
            _ => t,
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<Saved>,
    output: Saved,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    generation: u64,
}

/// Append-only record of operations.
///
/// Owned by one training step and dropped afterwards; cloning shares the same
/// record.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Arc<Mutex<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `value` as a differentiable leaf.
    pub fn var(&self, value: &Tensor) -> Tensor {
        let detached = value.detach();
        let id = self.push(Op::Leaf, Vec::new(), &detached);
        detached.with_node(NodeRef {
            tape: self.clone(),
            id,
        })
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Monotone counter bumped on every recorded node.
    pub fn generation(&self) -> u64 {
        self.inner.lock().unwrap().generation
    }

    pub(crate) fn same(&self, other: &Tape) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, op: Op, inputs: Vec<Saved>, output: &Tensor) -> usize {
        let mut inner = self.inner.lock().unwrap();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            inputs,
            output: Saved {
                id: Some(id),
                ..Saved::of(output)
            },
        });
        inner.generation += 1;
        id
    }

    /// Wraps a freshly computed value, recording it when any input is tracked.
    pub(crate) fn record(op: Op, inputs: &[&Tensor], output: Tensor) -> TensorResult<Tensor> {
        let mut tape: Option<&Tape> = None;
        for t in inputs {
            if let Some(node) = t.node() {
                match tape {
                    None => tape = Some(&node.tape),
                    Some(existing) if !existing.same(&node.tape) => {
                        return Err(TensorError::TapeMismatch)
                    }
                    _ => {}
                }
            }
        }
        let Some(tape) = tape else {
            return Ok(output);
        };
        let saved = inputs.iter().map(|t| Saved::of(t)).collect();
        let id = tape.push(op, saved, &output);
        Ok(output.with_node(NodeRef {
            tape: tape.clone(),
            id,
        }))
    }
}

/// Gradients of a scalar `output` with respect to each of `inputs`.
///
/// With `create_graph` the returned tensors are themselves recorded and may be
/// differentiated again; without it they are constants. Inputs that `output`
/// does not depend on receive zeros.
pub fn grad(output: &Tensor, inputs: &[&Tensor], create_graph: bool) -> TensorResult<Vec<Tensor>> {
    if !output.is_scalar() {
        return Err(TensorError::NotScalar(output.shape().to_vec()));
    }
    let mut input_ids = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        let node = t.node().ok_or(TensorError::NotOnTape(i))?;
        if let Some(out) = output.node() {
            if !out.tape.same(&node.tape) {
                return Err(TensorError::NotOnTape(i));
            }
        }
        input_ids.push(node.id);
    }
    let zeros = || -> TensorResult<Vec<Tensor>> {
        inputs.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect()
    };
    let Some(out) = output.node() else {
        return zeros();
    };
    let tape = out.tape.clone();
    let out_id = out.id;
    let Some(&lo) = input_ids.iter().min() else {
        return Ok(Vec::new());
    };
    if lo > out_id {
        return zeros();
    }

    // Nodes in [lo, out_id] that depend on at least one requested input.
    let span = out_id - lo + 1;
    let mut needed = vec![false; span];
    let mut is_input = vec![false; span];
    for &id in &input_ids {
        if id <= out_id {
            needed[id - lo] = true;
            is_input[id - lo] = true;
        }
    }
    {
        let inner = tape.inner.lock().unwrap();
        for id in lo..=out_id {
            if needed[id - lo] {
                continue;
            }
            needed[id - lo] = inner.nodes[id]
                .inputs
                .iter()
                .any(|s| matches!(s.id, Some(j) if j >= lo && needed[j - lo]));
        }
    }
    if !needed[span - 1] {
        return zeros();
    }

    let mut pending: Vec<Option<Tensor>> = vec![None; span];
    let mut found: Vec<Option<Tensor>> = vec![None; span];
    pending[span - 1] = Some(Tensor::scalar(1.0));

    for id in (lo..=out_id).rev() {
        let slot = id - lo;
        let Some(g) = pending[slot].take() else {
            continue;
        };
        if is_input[slot] {
            found[slot] = Some(g.clone());
        }
        let (op, saved_inputs, saved_output) = {
            let inner = tape.inner.lock().unwrap();
            let node = &inner.nodes[id];
            (node.op.clone(), node.inputs.clone(), node.output.clone())
        };
        if saved_inputs.is_empty() {
            continue;
        }
        let wants: Vec<bool> = saved_inputs
            .iter()
            .map(|s| matches!(s.id, Some(j) if j >= lo && needed[j - lo]))
            .collect();
        if !wants.iter().any(|&w| w) {
            continue;
        }
        let xs: Vec<Tensor> = saved_inputs
            .iter()
            .map(|s| s.restore(&tape, create_graph))
            .collect();
        let y = saved_output.restore(&tape, create_graph);
        let g = if create_graph { g } else { g.detach() };
        let contributions = backward(&op, &g, &xs, &y, &wants)?;
        for ((saved, contrib), want) in saved_inputs.iter().zip(contributions).zip(&wants) {
            let (Some(j), Some(c), true) = (saved.id, contrib, *want) else {
                continue;
            };
            let c = if create_graph { c } else { c.detach() };
            let acc = &mut pending[j - lo];
            *acc = Some(match acc.take() {
                None => c,
                Some(prev) => prev.add(&c)?,
            });
        }
    }

    input_ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| match id.checked_sub(lo).and_then(|s| found.get(s)).cloned().flatten() {
            Some(g) => Ok(g),
            None => Tensor::zeros(t.shape().to_vec()),
        })
        .collect()
}
