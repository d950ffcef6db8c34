//! Molecular graphs, SMILES, featurization, dataset files and task splits.

mod dataset;
mod features;
mod motif;
mod registry;
mod smiles;
mod synth;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{load_dataset, read_dataset, save_dataset, write_dataset, Molecule};
pub use features::{featurize, ELEMENTS, NUM_ATOM_FEATURES};
pub use motif::{contains_motif, Motif};
pub use registry::{
    build_registry, load_registry, save_registry, tasks_from_dataset, BfCounts, Partitions, RegistryConfig,
    Splits, TaskRegistry,
};
pub use smiles::{parse_smiles, write_smiles, SmilesError};
pub use synth::{synthesize_tasks, SynthSpec, SyntheticData, TypeCounts};

/// Bond vocabulary; the discriminant is the edge type index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondType {
    Single = 0,
    Double = 1,
    Triple = 2,
    Aromatic = 3,
}

pub const NUM_EDGE_TYPES: usize = 4;

impl BondType {
    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Self::Single),
            1 => Some(Self::Double),
            2 => Some(Self::Triple),
            3 => Some(Self::Aromatic),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Integer order, counting aromatic bonds as 1.
    pub fn order(self) -> u32 {
        match self {
            Self::Single | Self::Aromatic => 1,
            Self::Double => 2,
            Self::Triple => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    /// Element symbol with standard capitalization ("C", "Cl").
    pub element: String,
    pub aromatic: bool,
    pub charge: i32,
    pub hydrogens: u32,
    pub bracket: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub kind: BondType,
}

/// Undirected graph with typed edges and optional per-node features.
///
/// A skeleton (from [`parse_smiles`]) carries atoms but no features;
/// [`featurize`] fills in the 75-wide node matrix. Graphs loaded from explicit
/// node matrices have features but no atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct MolecularGraph {
    pub id: Option<String>,
    pub smiles: Option<String>,
    num_nodes: usize,
    atoms: Vec<Atom>,
    edges: Vec<Edge>,
    feature_width: usize,
    features: Vec<f64>,
}

impl MolecularGraph {
    /// Validates and normalizes edges: endpoints ordered `u < v`, no loops, no
    /// duplicate pairs.
    fn check_edges(num_nodes: usize, edges: &mut [Edge]) -> Result<()> {
        let mut seen = HashSet::with_capacity(edges.len());
        for e in edges.iter_mut() {
            if e.u > e.v {
                std::mem::swap(&mut e.u, &mut e.v);
            }
            if e.u == e.v {
                return Err(Error::data(format!("self loop on node {}", e.u)));
            }
            if e.v >= num_nodes {
                return Err(Error::data(format!(
                    "edge ({}, {}) out of range for {num_nodes} nodes",
                    e.u, e.v
                )));
            }
            if !seen.insert((e.u, e.v)) {
                return Err(Error::data(format!("duplicate edge ({}, {})", e.u, e.v)));
            }
        }
        Ok(())
    }

    pub fn from_atoms(atoms: Vec<Atom>, mut edges: Vec<Edge>) -> Result<Self> {
        let n = atoms.len();
        if n == 0 {
            return Err(Error::data("graph has no nodes"));
        }
        Self::check_edges(n, &mut edges)?;
        Ok(Self {
            id: None,
            smiles: None,
            num_nodes: n,
            atoms,
            edges,
            feature_width: 0,
            features: Vec::new(),
        })
    }

    /// A featurized graph given directly as a row-major `V x width` matrix.
    pub fn from_features(
        num_nodes: usize,
        width: usize,
        features: Vec<f64>,
        mut edges: Vec<Edge>,
    ) -> Result<Self> {
        if num_nodes == 0 || width == 0 {
            return Err(Error::data("graph needs at least one node and feature"));
        }
        if features.len() != num_nodes * width {
            return Err(Error::data(format!(
                "feature matrix has {} values, expected {num_nodes} x {width}",
                features.len()
            )));
        }
        Self::check_edges(num_nodes, &mut edges)?;
        Ok(Self {
            id: None,
            smiles: None,
            num_nodes,
            atoms: Vec::new(),
            edges,
            feature_width: width,
            features,
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn is_featurized(&self) -> bool {
        self.feature_width > 0
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    /// Row-major `V x F` node features (empty for skeletons).
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn node_features(&self, v: usize) -> &[f64] {
        &self.features[v * self.feature_width..(v + 1) * self.feature_width]
    }

    pub(crate) fn set_features(&mut self, width: usize, features: Vec<f64>) {
        debug_assert_eq!(features.len(), width * self.num_nodes);
        self.feature_width = width;
        self.features = features;
    }

    pub fn degree(&self, v: usize) -> usize {
        self.edges.iter().filter(|e| e.u == v || e.v == v).count()
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = (usize, BondType)> + '_ {
        self.edges.iter().filter_map(move |e| {
            if e.u == v {
                Some((e.v, e.kind))
            } else if e.v == v {
                Some((e.u, e.kind))
            } else {
                None
            }
        })
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes;
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..n).collect::<Vec<_>>() {
            return Err(Error::data("not a permutation"));
        }
        let mut atoms = self.atoms.clone();
        for (i, a) in self.atoms.iter().enumerate() {
            atoms[perm[i]] = a.clone();
        }
        let mut features = self.features.clone();
        let w = self.feature_width;
        for i in 0..n {
            features[perm[i] * w..(perm[i] + 1) * w]
                .copy_from_slice(&self.features[i * w..(i + 1) * w]);
        }
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .map(|e| Edge {
                u: perm[e.u],
                v: perm[e.v],
                kind: e.kind,
            })
            .collect();
        Self::check_edges(n, &mut edges)?;
        Ok(Self {
            id: self.id.clone(),
            smiles: self.smiles.clone(),
            num_nodes: n,
            atoms,
            edges,
            feature_width: w,
            features,
        })
    }

    /// Two disconnected copies of this graph.
    pub fn doubled(&self) -> Self {
        let n = self.num_nodes;
        let mut g = self.clone();
        g.num_nodes = 2 * n;
        g.atoms.extend(self.atoms.iter().cloned());
        g.features.extend_from_slice(&self.features);
        g.edges.extend(self.edges.iter().map(|e| Edge {
            u: e.u + n,
            v: e.v + n,
            kind: e.kind,
        }));
        g.smiles = None;
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskType {
    /// ADME
    A,
    /// Toxicity
    T,
    /// Physicochemical
    P,
    /// Binding
    B,
    /// Functional
    F,
}

impl TaskType {
    pub const ALL: [TaskType; 5] = [Self::A, Self::T, Self::P, Self::B, Self::F];

    /// Types seen during meta-training; the rest are out-of-distribution.
    pub fn in_distribution(self) -> bool {
        matches!(self, Self::B | Self::F)
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::A => "A",
            Self::T => "T",
            Self::P => "P",
            Self::B => "B",
            Self::F => "F",
        };
        f.write_str(s)
    }
}

impl FromStr for TaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Self::A),
            "T" => Ok(Self::T),
            "P" => Ok(Self::P),
            "B" => Ok(Self::B),
            "F" => Ok(Self::F),
            other => Err(Error::data(format!("unknown task type `{other}`"))),
        }
    }
}

/// One binary classification task with its instance partitions.
#[derive(Debug, Clone)]
pub struct Task {
    pub id: String,
    pub task_type: TaskType,
    pub instances: Vec<(Arc<MolecularGraph>, u8)>,
    pub partitions: Partitions,
}

impl Task {
    pub fn positives(&self) -> usize {
        self.instances.iter().filter(|(_, y)| *y == 1).count()
    }

    pub fn has_both_classes(&self) -> bool {
        let p = self.positives();
        p > 0 && p < self.instances.len()
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<(Arc<MolecularGraph>, u8)> {
        indices.iter().map(|&i| self.instances[i].clone()).collect()
    }
}
