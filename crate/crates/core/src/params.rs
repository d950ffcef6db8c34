use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Ordered, named collection of tensors describing one model instance.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    tensors: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Params(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Every tensor recorded as a fresh leaf on `tape`.
    pub fn attach(&self, tape: &Tape) -> ParamSet {
        self.map(|_, t| tape.var(t))
    }

    pub fn detach(&self) -> ParamSet {
        self.map(|_, t| t.detach())
    }

    pub fn map(&self, mut f: impl FnMut(&str, &Tensor) -> Tensor) -> ParamSet {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), f(k, v)))
                .collect(),
        }
    }

    pub fn subset(&self, mut keep: impl FnMut(&str) -> bool) -> ParamSet {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copy of `self` with entries replaced by those in `updates`; order kept.
    pub fn merged(&self, updates: &ParamSet) -> Result<ParamSet> {
        let mut out = self.clone();
        for (name, t) in updates.iter() {
            let slot = out
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::Params(format!("unknown parameter `{name}`")))?;
            *slot = t.clone();
        }
        Ok(out)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.values()
    }

    /// Checks that `other` has exactly the same names (in order) and shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Params(format!(
                "expected {} tensors, got {}",
                self.len(),
                other.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.iter().zip(other.iter()) {
            if a != b {
                return Err(Error::Params(format!("name `{b}` where `{a}` expected")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Params(format!(
                    "`{a}` has shape {:?}, got {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.bit_eq(tb))
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.tensors()
            .zip(other.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}
