//! Synthetic molecule-like tasks: each task is "does this graph contain motif
//! M", with molecules drawn from a small valence-respecting generator.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    contains_motif, featurize, parse_smiles, tasks_from_dataset, write_smiles, Atom, BondType,
    Edge, Molecule, MolecularGraph, Motif, Task, TaskType,
};
use crate::error::{Error, Result};

/// Number of tasks to generate per type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TypeCounts {
    #[serde(rename = "A")]
    pub adme: usize,
    #[serde(rename = "T")]
    pub toxicity: usize,
    #[serde(rename = "P")]
    pub physchem: usize,
    #[serde(rename = "B")]
    pub binding: usize,
    #[serde(rename = "F")]
    pub functional: usize,
}

impl TypeCounts {
    pub fn get(&self, ty: TaskType) -> usize {
        match ty {
            TaskType::A => self.adme,
            TaskType::T => self.toxicity,
            TaskType::P => self.physchem,
            TaskType::B => self.binding,
            TaskType::F => self.functional,
        }
    }

    pub fn total(&self) -> usize {
        TaskType::ALL.iter().map(|&t| self.get(t)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub task_counts: TypeCounts,
    pub instances_per_task: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub positive_fraction: f64,
    /// Motifs for B and F tasks. Empty means the built-in set.
    pub in_distribution_motifs: Vec<Motif>,
    /// Motifs for A, T and P tasks. Empty means the built-in set.
    pub out_of_distribution_motifs: Vec<Motif>,
    /// Attempts at drawing a motif-free negative before giving up.
    pub max_rejections: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            task_counts: TypeCounts {
                binding: 6,
                functional: 7,
                adme: 1,
                toxicity: 1,
                physchem: 1,
                ..TypeCounts::default()
            },
            instances_per_task: 128,
            min_atoms: 8,
            max_atoms: 24,
            positive_fraction: 0.5,
            in_distribution_motifs: Vec::new(),
            out_of_distribution_motifs: Vec::new(),
            max_rejections: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub molecules: Vec<Molecule>,
    pub task_types: BTreeMap<String, TaskType>,
    pub motifs: BTreeMap<String, Motif>,
}

impl SyntheticData {
    pub fn tasks(&self) -> Result<Vec<Task>> {
        tasks_from_dataset(&self.molecules, &self.task_types)
    }
}

use BondType::{Double as D, Single as S, Triple as Tr};

fn default_in_distribution() -> Vec<Motif> {
    vec![
        Motif::new("amide", &["C", "O", "N"], &[(0, 1, D), (0, 2, S)]),
        Motif::new("nitrile", &["C", "C", "N"], &[(0, 1, S), (1, 2, Tr)]),
        Motif::new("ester", &["C", "O", "O", "C"], &[(0, 1, D), (0, 2, S), (2, 3, S)]),
        Motif::new("thioether", &["C", "S", "C"], &[(0, 1, S), (1, 2, S)]),
        Motif::new("fluorovinyl", &["C", "C", "F"], &[(0, 1, D), (1, 2, S)]),
        Motif::new("hydrazine", &["N", "N", "C"], &[(0, 1, S), (1, 2, S)]),
        Motif::new("urea", &["N", "C", "N", "O"], &[(0, 1, S), (1, 2, S), (1, 3, D)]),
        Motif::new("sulfonyl_f", &["S", "C", "F"], &[(0, 1, S), (1, 2, S)]),
    ]
}

fn default_out_of_distribution() -> Vec<Motif> {
    vec![
        Motif::new("chlorovinyl", &["C", "C", "Cl"], &[(0, 1, D), (1, 2, S)]),
        Motif::new("imine_o", &["C", "N", "O"], &[(0, 1, D), (1, 2, S)]),
        Motif::new("disulfide", &["C", "S", "S"], &[(0, 1, S), (1, 2, S)]),
        Motif::new("peroxide_n", &["N", "O", "O"], &[(0, 1, S), (1, 2, S)]),
    ]
}

const ELEMENT_WEIGHTS: [(&str, u32, f64); 6] = [
    ("C", 4, 0.62),
    ("N", 3, 0.12),
    ("O", 2, 0.14),
    ("S", 2, 0.04),
    ("F", 1, 0.04),
    ("Cl", 1, 0.04),
];

fn max_valence(element: &str) -> Option<u32> {
    ELEMENT_WEIGHTS
        .iter()
        .find(|(e, _, _)| *e == element)
        .map(|&(_, v, _)| v)
}

/// Mutable skeleton with per-atom free valence.
struct Builder {
    atoms: Vec<Atom>,
    edges: Vec<Edge>,
    free: Vec<u32>,
}

impl Builder {
    fn new() -> Self {
        Self {
            atoms: Vec::new(),
            edges: Vec::new(),
            free: Vec::new(),
        }
    }

    fn add_atom(&mut self, element: &str, aromatic: bool, free: u32) -> usize {
        self.atoms.push(Atom {
            element: element.to_string(),
            aromatic,
            charge: 0,
            hydrogens: 0,
            bracket: false,
        });
        self.free.push(free);
        self.atoms.len() - 1
    }

    fn bond(&mut self, u: usize, v: usize, kind: BondType) {
        let order = kind.order();
        self.free[u] -= order;
        self.free[v] -= order;
        self.edges.push(Edge { u, v, kind });
    }

    fn plant(&mut self, motif: &Motif) -> Result<()> {
        let base = self.atoms.len();
        for e in &motif.elements {
            let v = max_valence(e)
                .ok_or_else(|| Error::config(format!("motif element `{e}` not supported")))?;
            self.add_atom(e, false, v);
        }
        for &(i, j, k) in &motif.bonds {
            let kind = BondType::from_index(k)
                .filter(|&k| k != BondType::Aromatic)
                .ok_or_else(|| Error::config(format!("motif `{}` bond type {k}", motif.name)))?;
            let (u, v) = (base + i, base + j);
            if i >= motif.len() || j >= motif.len() || self.free[u] < kind.order() || self.free[v] < kind.order() {
                return Err(Error::config(format!("motif `{}` violates valence", motif.name)));
            }
            self.bond(u, v, kind);
        }
        Ok(())
    }

    fn phenyl(&mut self) -> usize {
        let ring: Vec<usize> = (0..6).map(|_| self.add_atom("C", true, 1)).collect();
        for i in 0..6 {
            self.edges.push(Edge {
                u: ring[i],
                v: ring[(i + 1) % 6],
                kind: BondType::Aromatic,
            });
        }
        ring[0]
    }

    fn hop_distance(&self, from: usize, to: usize) -> Option<usize> {
        let n = self.atoms.len();
        let mut dist = vec![usize::MAX; n];
        let mut queue = VecDeque::from([from]);
        dist[from] = 0;
        while let Some(x) = queue.pop_front() {
            if x == to {
                return Some(dist[x]);
            }
            for e in &self.edges {
                let y = if e.u == x {
                    e.v
                } else if e.v == x {
                    e.u
                } else {
                    continue;
                };
                if dist[y] == usize::MAX {
                    dist[y] = dist[x] + 1;
                    queue.push_back(y);
                }
            }
        }
        None
    }

    fn open_atoms(&self, min_free: u32) -> Vec<usize> {
        (0..self.atoms.len())
            .filter(|&v| self.free[v] >= min_free)
            .collect()
    }

    fn finish(self) -> Result<MolecularGraph> {
        MolecularGraph::from_atoms(self.atoms, self.edges)
    }
}

fn sample_element<R: Rng>(rng: &mut R) -> (&'static str, u32) {
    let total: f64 = ELEMENT_WEIGHTS.iter().map(|(_, _, w)| w).sum();
    let mut r = rng.gen::<f64>() * total;
    for &(e, v, w) in &ELEMENT_WEIGHTS {
        if r < w {
            return (e, v);
        }
        r -= w;
    }
    ("C", 4)
}

/// Grows a connected molecule of `target` heavy atoms, optionally seeded with
/// a motif and a phenyl ring, then closes up to two 5-7 membered rings.
fn grow<R: Rng>(rng: &mut R, target: usize, motif: Option<&Motif>) -> Result<Option<MolecularGraph>> {
    let mut b = Builder::new();
    if let Some(m) = motif {
        b.plant(m)?;
    }
    if target >= b.atoms.len() + 8 && rng.gen_bool(0.3) {
        let anchor = b.phenyl();
        if b.atoms.len() > 6 {
            // attach the ring to an aliphatic atom already present
            let open: Vec<usize> = b.open_atoms(1).into_iter().filter(|&v| !b.atoms[v].aromatic).collect();
            match open.choose(rng) {
                Some(&u) => b.bond(u, anchor, S),
                None => return Ok(None),
            }
        }
    }
    if b.atoms.is_empty() {
        b.add_atom("C", false, 4);
    }
    while b.atoms.len() < target {
        let open = b.open_atoms(1);
        let Some(&u) = open.choose(rng) else {
            return Ok(None);
        };
        let (element, valence) = sample_element(rng);
        let v = b.add_atom(element, false, valence);
        let limit = b.free[u].min(valence).min(if b.atoms[u].aromatic { 1 } else { 3 });
        let roll: f64 = rng.gen();
        let kind = if limit >= 3 && roll < 0.04 {
            Tr
        } else if limit >= 2 && roll < 0.18 {
            D
        } else {
            S
        };
        b.bond(u, v, kind);
    }
    for _ in 0..2 {
        if !rng.gen_bool(0.5) {
            continue;
        }
        let open: Vec<usize> = b.open_atoms(1).into_iter().filter(|&v| !b.atoms[v].aromatic).collect();
        let mut pairs = Vec::new();
        for (i, &x) in open.iter().enumerate() {
            for &y in &open[i + 1..] {
                if let Some(d) = b.hop_distance(x, y) {
                    if (4..=6).contains(&d) {
                        pairs.push((x, y));
                    }
                }
            }
        }
        if let Some(&(x, y)) = pairs.choose(rng) {
            b.bond(x, y, S);
        }
    }
    Ok(Some(b.finish()?))
}

/// Shuffles node order, then round-trips through SMILES so the stored graph is
/// exactly what a reader of the dataset file will see.
fn materialize<R: Rng>(rng: &mut R, skeleton: MolecularGraph, id: String) -> Result<MolecularGraph> {
    let mut perm: Vec<usize> = (0..skeleton.num_nodes()).collect();
    perm.shuffle(rng);
    let shuffled = skeleton.permuted(&perm)?;
    let smiles = write_smiles(&shuffled)
        .ok_or_else(|| Error::data("generator produced a disconnected graph"))?;
    Ok(featurize(&parse_smiles(&smiles)?).with_id(id))
}

fn validate(spec: &SynthSpec, libraries: [&[Motif]; 2]) -> Result<()> {
    if spec.instances_per_task == 0 {
        return Err(Error::config("instances_per_task must be positive"));
    }
    if spec.min_atoms < 3 || spec.max_atoms > 30 || spec.min_atoms > spec.max_atoms {
        return Err(Error::config("atom range must satisfy 3 <= min_atoms <= max_atoms <= 30"));
    }
    if !(0.3..=0.7).contains(&spec.positive_fraction) {
        return Err(Error::config("positive_fraction must lie in [0.3, 0.7]"));
    }
    for lib in libraries {
        for m in lib {
            if m.len() > spec.max_atoms {
                return Err(Error::config(format!(
                    "motif `{}` has {} atoms but graphs hold at most {}",
                    m.name,
                    m.len(),
                    spec.max_atoms
                )));
            }
            Builder::new().plant(m)?;
        }
    }
    Ok(())
}

/// Generates every task in `spec`. Task `i` of a type uses motif `i` of its
/// library (cycling), so B/F tasks and A/T/P tasks never share a motif when the
/// two libraries are disjoint. Each task gets its own molecules with exactly
/// `round(instances * positive_fraction)` positives.
pub fn synthesize_tasks<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<SyntheticData> {
    let in_lib = if spec.in_distribution_motifs.is_empty() {
        default_in_distribution()
    } else {
        spec.in_distribution_motifs.clone()
    };
    let out_lib = if spec.out_of_distribution_motifs.is_empty() {
        default_out_of_distribution()
    } else {
        spec.out_of_distribution_motifs.clone()
    };
    validate(spec, [&in_lib, &out_lib])?;

    let mut data = SyntheticData {
        molecules: Vec::new(),
        task_types: BTreeMap::new(),
        motifs: BTreeMap::new(),
    };
    let n = spec.instances_per_task;
    let n_pos = ((n as f64) * spec.positive_fraction).round() as usize;
    let mut ood_index = 0;
    for ty in [TaskType::B, TaskType::F, TaskType::A, TaskType::T, TaskType::P] {
        for i in 0..spec.task_counts.get(ty) {
            let task_id = format!("{ty}{i:04}");
            let motif = if ty.in_distribution() {
                &in_lib[i % in_lib.len()]
            } else {
                ood_index += 1;
                &out_lib[(ood_index - 1) % out_lib.len()]
            };
            let mut labels: Vec<u8> = (0..n).map(|j| u8::from(j < n_pos)).collect();
            labels.shuffle(rng);
            for (j, &y) in labels.iter().enumerate() {
                let id = format!("{task_id}-{j:04}");
                let graph = draw(rng, spec, motif, y == 1, id)?;
                data.molecules.push(Molecule {
                    graph: Arc::new(graph),
                    labels: BTreeMap::from([(task_id.clone(), y)]),
                });
            }
            data.task_types.insert(task_id.clone(), ty);
            data.motifs.insert(task_id, motif.clone());
        }
    }
    Ok(data)
}

fn draw<R: Rng>(rng: &mut R, spec: &SynthSpec, motif: &Motif, positive: bool, id: String) -> Result<MolecularGraph> {
    for _ in 0..spec.max_rejections {
        let lo = spec.min_atoms.max(if positive { motif.len() } else { 0 });
        let target = rng.gen_range(lo..=spec.max_atoms);
        let Some(skeleton) = grow(rng, target, positive.then_some(motif))? else {
            continue;
        };
        let g = materialize(rng, skeleton, id.clone())?;
        if contains_motif(&g, motif) == positive {
            return Ok(g);
        }
    }
    Err(Error::data(format!(
        "could not draw a {} example for motif `{}` in {} attempts",
        if positive { "positive" } else { "negative" },
        motif.name,
        spec.max_rejections
    )))
}
