use super::{BondType, MolecularGraph};

/// Element vocabulary for the one-hot block; anything else maps to a trailing
/// "other" slot.
pub const ELEMENTS: [&str; 44] = [
    "C", "N", "O", "S", "F", "Si", "P", "Cl", "Br", "Mg", "Na", "Ca", "Fe", "As", "Al", "I", "B",
    "V", "K", "Tl", "Yb", "Sb", "Sn", "Ag", "Pd", "Co", "Se", "Ti", "Zn", "H", "Li", "Ge", "Cu",
    "Au", "Ni", "Cd", "In", "Mn", "Zr", "Cr", "Pt", "Hg", "Pb", "Bi",
];

pub const NUM_ATOM_FEATURES: usize = 75;

pub(crate) const ELEMENT_OFFSET: usize = 0;
pub(crate) const DEGREE_OFFSET: usize = ELEMENT_OFFSET + ELEMENTS.len() + 1;
pub(crate) const HYDROGEN_OFFSET: usize = DEGREE_OFFSET + 11;
pub(crate) const CHARGE_OFFSET: usize = HYDROGEN_OFFSET + 7;
pub(crate) const HYBRID_OFFSET: usize = CHARGE_OFFSET + 1;
pub(crate) const AROMATIC_OFFSET: usize = HYBRID_OFFSET + 5;
pub(crate) const VALENCE_OFFSET: usize = AROMATIC_OFFSET + 1;

const _: () = assert!(VALENCE_OFFSET + 5 == NUM_ATOM_FEATURES);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Hybridization {
    Sp = 0,
    Sp2 = 1,
    Sp3 = 2,
    Aromatic = 3,
    Other = 4,
}

pub(crate) fn hybridization(g: &MolecularGraph, v: usize) -> Hybridization {
    let atom = &g.atoms()[v];
    if atom.aromatic {
        return Hybridization::Aromatic;
    }
    let (mut doubles, mut triples) = (0, 0);
    for (_, kind) in g.neighbors(v) {
        match kind {
            BondType::Double => doubles += 1,
            BondType::Triple => triples += 1,
            _ => {}
        }
    }
    if triples > 0 || doubles >= 2 {
        Hybridization::Sp
    } else if doubles == 1 {
        Hybridization::Sp2
    } else if g.degree(v) + atom.hydrogens as usize >= 2 {
        Hybridization::Sp3
    } else {
        Hybridization::Other
    }
}

/// Bond order sum with aromatic bonds as 1.5, rounded half up.
fn explicit_valence(g: &MolecularGraph, v: usize) -> usize {
    let doubled: usize = g
        .neighbors(v)
        .map(|(_, k)| match k {
            BondType::Aromatic => 3,
            other => 2 * other.order() as usize,
        })
        .sum();
    doubled.div_ceil(2)
}

/// Fills the node feature matrix of a skeleton graph.
///
/// Layout per node: element one-hot over [`ELEMENTS`] plus "other" (45),
/// heavy-atom degree 0..=10 (11), hydrogen count 0..=6 (7), formal charge as a
/// scalar (1), hybridization sp/sp2/sp3/aromatic/other (5), aromatic flag (1),
/// explicit valence 0..=4 (5). Out-of-range counts land in the last slot of
/// their block. Graphs without atoms are returned unchanged.
pub fn featurize(g: &MolecularGraph) -> MolecularGraph {
    let mut out = g.clone();
    if g.atoms().is_empty() {
        return out;
    }
    let n = g.num_nodes();
    let mut data = vec![0.0; n * NUM_ATOM_FEATURES];
    for (v, atom) in g.atoms().iter().enumerate() {
        let row = &mut data[v * NUM_ATOM_FEATURES..(v + 1) * NUM_ATOM_FEATURES];
        let element = ELEMENTS
            .iter()
            .position(|&e| e == atom.element)
            .unwrap_or(ELEMENTS.len());
        row[ELEMENT_OFFSET + element] = 1.0;
        row[DEGREE_OFFSET + g.degree(v).min(10)] = 1.0;
        row[HYDROGEN_OFFSET + (atom.hydrogens as usize).min(6)] = 1.0;
        row[CHARGE_OFFSET] = f64::from(atom.charge);
        row[HYBRID_OFFSET + hybridization(g, v) as usize] = 1.0;
        row[AROMATIC_OFFSET] = if atom.aromatic { 1.0 } else { 0.0 };
        row[VALENCE_OFFSET + explicit_valence(g, v).min(4)] = 1.0;
    }
    out.set_features(NUM_ATOM_FEATURES, data);
    out
}
