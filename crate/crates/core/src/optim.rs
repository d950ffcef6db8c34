//! Plain gradient descent for inner loops and Adam for everything else.
//!
//! Both optimizers are functional: they return new parameters and leave their
//! inputs untouched, so an initialization and its adapted copy can coexist on
//! one tape.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// `p - lr * g` for every entry. Stays differentiable with respect to `params`
/// (and through `grads`, when they were produced with `create_graph`).
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
    params.check_compatible(grads)?;
    params
        .iter()
        .zip(grads.tensors())
        .map(|((name, p), g)| Ok((name.to_string(), p.sub(&g.scale(lr)?)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: IndexMap<String, Vec<f64>> = params
            .iter()
            .map(|(k, t)| (k.to_string(), vec![0.0; t.numel()]))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update. Parameters come back as constants.
pub fn adam_step(
    state: &AdamState,
    params: &ParamSet,
    grads: &ParamSet,
    lr: f64,
) -> Result<(AdamState, ParamSet)> {
    params.check_compatible(grads)?;
    if state.first.len() != params.len() {
        return Err(Error::Params(format!(
            "optimizer tracks {} tensors, parameters have {}",
            state.first.len(),
            params.len()
        )));
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    let step = state.step + 1;
    let c1 = 1.0 - beta1.powi(step as i32);
    let c2 = 1.0 - beta2.powi(step as i32);
    let mut next = AdamState {
        config: state.config,
        step,
        first: IndexMap::with_capacity(params.len()),
        second: IndexMap::with_capacity(params.len()),
    };
    let mut updated = ParamSet::new();
    for ((name, p), g) in params.iter().zip(grads.tensors()) {
        let (Some(m), Some(v)) = (state.first.get(name), state.second.get(name)) else {
            return Err(Error::Params(format!("no optimizer state for `{name}`")));
        };
        if m.len() != p.numel() {
            return Err(Error::Params(format!("optimizer state for `{name}` has wrong size")));
        }
        let mut m_next = Vec::with_capacity(m.len());
        let mut v_next = Vec::with_capacity(v.len());
        let mut values = Vec::with_capacity(m.len());
        for (((&pi, &gi), &mi), &vi) in p.data().iter().zip(g.data()).zip(m).zip(v) {
            let mi = beta1 * mi + (1.0 - beta1) * gi;
            let vi = beta2 * vi + (1.0 - beta2) * gi * gi;
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            values.push(pi - lr * m_hat / (v_hat.sqrt() + eps));
            m_next.push(mi);
            v_next.push(vi);
        }
        next.first.insert(name.to_string(), m_next);
        next.second.insert(name.to_string(), v_next);
        updated.insert(name, Tensor::new(p.shape().to_vec(), values)?);
    }
    Ok((next, updated))
}
