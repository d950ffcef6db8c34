use serde::{Deserialize, Serialize};

use super::{BondType, MolecularGraph};

/// A labeled substructure: element per atom and typed bonds between them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Motif {
    pub name: String,
    pub elements: Vec<String>,
    /// `(i, j, edge type index)`
    pub bonds: Vec<(usize, usize, usize)>,
}

impl Motif {
    pub fn new(name: &str, elements: &[&str], bonds: &[(usize, usize, BondType)]) -> Self {
        Self {
            name: name.to_string(),
            elements: elements.iter().map(|s| s.to_string()).collect(),
            bonds: bonds.iter().map(|&(i, j, k)| (i, j, k.index())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    fn bond_between(&self, i: usize, j: usize) -> Option<usize> {
        self.bonds
            .iter()
            .find(|&&(a, b, _)| (a, b) == (i, j) || (a, b) == (j, i))
            .map(|&(_, _, k)| k)
    }
}

/// Whether `g` contains `motif` as a (not necessarily induced) subgraph with
/// matching elements and bond types. Backtracking search; graphs here are small.
pub fn contains_motif(g: &MolecularGraph, motif: &Motif) -> bool {
    if motif.is_empty() {
        return true;
    }
    let atoms = g.atoms();
    if atoms.len() < motif.len() {
        return false;
    }
    let n = atoms.len();
    let mut bond = vec![None; n * n];
    for e in g.edges() {
        bond[e.u * n + e.v] = Some(e.kind.index());
        bond[e.v * n + e.u] = Some(e.kind.index());
    }
    let mut assignment: Vec<usize> = Vec::with_capacity(motif.len());
    let mut used = vec![false; n];

    fn extend(
        motif: &Motif,
        atoms: &[super::Atom],
        bond: &[Option<usize>],
        n: usize,
        assignment: &mut Vec<usize>,
        used: &mut [bool],
    ) -> bool {
        let i = assignment.len();
        if i == motif.len() {
            return true;
        }
        for v in 0..n {
            if used[v] || atoms[v].element != motif.elements[i] {
                continue;
            }
            let consistent = (0..i).all(|j| match motif.bond_between(i, j) {
                Some(k) => bond[v * n + assignment[j]] == Some(k),
                None => true,
            });
            if !consistent {
                continue;
            }
            used[v] = true;
            assignment.push(v);
            if extend(motif, atoms, bond, n, assignment, used) {
                return true;
            }
            assignment.pop();
            used[v] = false;
        }
        false
    }

    extend(motif, atoms, &bond, n, &mut assignment, &mut used)
}
