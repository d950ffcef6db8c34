//! A SMILES subset: organic-subset and bracket atoms, explicit and aromatic
//! bonds, branches and ring closures. No stereo, isotopes, wildcards or
//! disconnected components.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{Atom, BondType, Edge, MolecularGraph};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SmilesError {
    #[error("empty SMILES string")]
    Empty,
    #[error("unsupported token `{token}` at position {pos}")]
    Unsupported { token: String, pos: usize },
    #[error("ring bond {label} opened at position {pos} is never closed")]
    UnclosedRing { label: u32, pos: usize },
    #[error("unbalanced parenthesis at position {pos}")]
    UnbalancedParen { pos: usize },
    #[error("bond symbol at position {pos} has no atom to attach to")]
    DanglingBond { pos: usize },
    #[error("conflicting bond symbols for ring bond {label} at position {pos}")]
    RingBondConflict { label: u32, pos: usize },
    #[error("atoms {u} and {v} are bonded twice")]
    DuplicateBond { u: usize, v: usize },
    #[error("valence violation on atom {atom} ({element}): bond order sum {valence}")]
    Valence {
        atom: usize,
        element: String,
        valence: u32,
    },
}

fn standard_valences(element: &str) -> Option<&'static [u32]> {
    Some(match element {
        "B" => &[3],
        "C" => &[4],
        "N" => &[3, 5],
        "O" => &[2],
        "P" => &[3, 5],
        "S" => &[2, 4, 6],
        "F" | "Cl" | "Br" | "I" => &[1],
        _ => return None,
    })
}

/// Implicit hydrogens for an organic-subset atom with the given bond order
/// sum (aromatic bonds counted as 1).
pub(crate) fn implicit_hydrogens(element: &str, aromatic: bool, bond_sum: u32) -> Option<u32> {
    let valences = standard_valences(element)?;
    let max = *valences.last()?;
    if bond_sum > max {
        return None;
    }
    if aromatic {
        // one valence unit goes to the pi system
        return Some(valences[0].saturating_sub(bond_sum + 1));
    }
    valences
        .iter()
        .find(|&&v| v >= bond_sum)
        .map(|&v| v - bond_sum)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    atoms: Vec<Atom>,
    edges: Vec<Edge>,
}

impl<'a> Parser<'a> {
    fn unsupported(&self, start: usize, end: usize) -> SmilesError {
        SmilesError::Unsupported {
            token: String::from_utf8_lossy(&self.src[start..end.min(self.src.len())]).into_owned(),
            pos: start,
        }
    }

    fn bond(&mut self, u: usize, v: usize, kind: BondType) -> Result<(), SmilesError> {
        let (a, b) = (u.min(v), u.max(v));
        if a == b || self.edges.iter().any(|e| e.u == a && e.v == b) {
            return Err(SmilesError::DuplicateBond { u: a, v: b });
        }
        self.edges.push(Edge { u: a, v: b, kind });
        Ok(())
    }

    fn implied(&self, u: usize, v: usize) -> BondType {
        if self.atoms[u].aromatic && self.atoms[v].aromatic {
            BondType::Aromatic
        } else {
            BondType::Single
        }
    }

    fn organic_atom(&mut self) -> Option<Atom> {
        let c = self.src[self.pos];
        let next = self.src.get(self.pos + 1).copied();
        let (element, aromatic, len) = match (c, next) {
            (b'C', Some(b'l')) => ("Cl", false, 2),
            (b'B', Some(b'r')) => ("Br", false, 2),
            (b'B', _) => ("B", false, 1),
            (b'C', _) => ("C", false, 1),
            (b'N', _) => ("N", false, 1),
            (b'O', _) => ("O", false, 1),
            (b'P', _) => ("P", false, 1),
            (b'S', _) => ("S", false, 1),
            (b'F', _) => ("F", false, 1),
            (b'I', _) => ("I", false, 1),
            (b'b', _) => ("B", true, 1),
            (b'c', _) => ("C", true, 1),
            (b'n', _) => ("N", true, 1),
            (b'o', _) => ("O", true, 1),
            (b'p', _) => ("P", true, 1),
            (b's', _) => ("S", true, 1),
            _ => return None,
        };
        self.pos += len;
        Some(Atom {
            element: element.to_string(),
            aromatic,
            charge: 0,
            hydrogens: 0,
            bracket: false,
        })
    }

    fn bracket_atom(&mut self) -> Result<Atom, SmilesError> {
        let start = self.pos;
        let close = self.src[start..]
            .iter()
            .position(|&b| b == b']')
            .map(|i| start + i)
            .ok_or_else(|| self.unsupported(start, self.src.len()))?;
        let body = &self.src[start + 1..close];
        let mut i: usize;
        let bad = |i: usize| SmilesError::Unsupported {
            token: String::from_utf8_lossy(&self.src[start..=close]).into_owned(),
            pos: start + 1 + i,
        };
        let first = *body.first().ok_or_else(|| bad(0))?;
        let (element, aromatic) = if first.is_ascii_uppercase() {
            i = 1;
            let mut sym = (first as char).to_string();
            if let Some(&c) = body.get(1) {
                if c.is_ascii_lowercase() {
                    sym.push(c as char);
                    i = 2;
                }
            }
            (sym, false)
        } else if first.is_ascii_lowercase() {
            let two = body.get(1).filter(|c| c.is_ascii_lowercase());
            let sym = match (first, two) {
                (b's', Some(b'e')) => "Se",
                (b'a', Some(b's')) => "As",
                (b'b' | b'c' | b'n' | b'o' | b'p' | b's', _) => {
                    match first {
                        b'b' => "B",
                        b'c' => "C",
                        b'n' => "N",
                        b'o' => "O",
                        b'p' => "P",
                        _ => "S",
                    }
                }
                _ => return Err(bad(0)),
            };
            i = sym.len();
            (sym.to_string(), true)
        } else {
            // isotopes, wildcards
            return Err(bad(0));
        };
        let mut hydrogens = 0;
        if body.get(i) == Some(&b'H') {
            i += 1;
            hydrogens = 1;
            if let Some(d) = body.get(i).filter(|c| c.is_ascii_digit()) {
                hydrogens = u32::from(d - b'0');
                i += 1;
            }
        }
        let mut charge = 0i32;
        if let Some(&sign @ (b'+' | b'-')) = body.get(i) {
            let unit = if sign == b'+' { 1 } else { -1 };
            i += 1;
            charge = unit;
            if let Some(d) = body.get(i).filter(|c| c.is_ascii_digit()) {
                charge = unit * i32::from(d - b'0');
                i += 1;
            } else {
                while body.get(i) == Some(&sign) {
                    charge += unit;
                    i += 1;
                }
            }
        }
        if i != body.len() {
            return Err(bad(i));
        }
        self.pos = close + 1;
        Ok(Atom {
            element,
            aromatic,
            charge,
            hydrogens,
            bracket: true,
        })
    }

    fn parse(mut self) -> Result<MolecularGraph, SmilesError> {
        if self.src.is_empty() {
            return Err(SmilesError::Empty);
        }
        let mut prev: Option<usize> = None;
        let mut pending: Option<(BondType, usize)> = None;
        let mut branches: Vec<(usize, usize)> = Vec::new();
        let mut rings: BTreeMap<u32, (usize, Option<BondType>, usize)> = BTreeMap::new();

        while self.pos < self.src.len() {
            let start = self.pos;
            let c = self.src[start];
            match c {
                b'(' => {
                    let p = prev.ok_or(SmilesError::UnbalancedParen { pos: start })?;
                    if pending.is_some() {
                        return Err(self.unsupported(start, start + 1));
                    }
                    branches.push((p, start));
                    self.pos += 1;
                }
                b')' => {
                    if let Some((_, pos)) = pending {
                        return Err(SmilesError::DanglingBond { pos });
                    }
                    let (p, _) = branches
                        .pop()
                        .ok_or(SmilesError::UnbalancedParen { pos: start })?;
                    prev = Some(p);
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' => {
                    if pending.is_some() || prev.is_none() {
                        return Err(SmilesError::DanglingBond { pos: start });
                    }
                    let kind = match c {
                        b'-' => BondType::Single,
                        b'=' => BondType::Double,
                        b'#' => BondType::Triple,
                        _ => BondType::Aromatic,
                    };
                    pending = Some((kind, start));
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let label = if c == b'%' {
                        let digits = self.src.get(start + 1..start + 3);
                        match digits {
                            Some(d) if d.iter().all(u8::is_ascii_digit) => {
                                self.pos += 3;
                                u32::from(d[0] - b'0') * 10 + u32::from(d[1] - b'0')
                            }
                            _ => return Err(self.unsupported(start, start + 3)),
                        }
                    } else {
                        self.pos += 1;
                        u32::from(c - b'0')
                    };
                    let here = prev.ok_or_else(|| self.unsupported(start, self.pos))?;
                    let bond = pending.take().map(|(k, _)| k);
                    match rings.remove(&label) {
                        Some((other, open_bond, _)) => {
                            let kind = match (open_bond, bond) {
                                (Some(a), Some(b)) if a != b => {
                                    return Err(SmilesError::RingBondConflict { label, pos: start })
                                }
                                (Some(k), _) | (None, Some(k)) => k,
                                (None, None) => self.implied(other, here),
                            };
                            self.bond(other, here, kind)?;
                        }
                        None => {
                            rings.insert(label, (here, bond, start));
                        }
                    }
                }
                _ => {
                    let atom = if c == b'[' {
                        self.bracket_atom()?
                    } else {
                        self.organic_atom()
                            .ok_or_else(|| self.unsupported(start, start + 1))?
                    };
                    self.atoms.push(atom);
                    let idx = self.atoms.len() - 1;
                    if let Some(p) = prev {
                        let kind = match pending.take() {
                            Some((k, _)) => k,
                            None => self.implied(p, idx),
                        };
                        self.bond(p, idx, kind)?;
                    }
                    prev = Some(idx);
                }
            }
        }
        if let Some((_, pos)) = pending {
            return Err(SmilesError::DanglingBond { pos });
        }
        if let Some(&(_, pos)) = branches.last() {
            return Err(SmilesError::UnbalancedParen { pos });
        }
        if let Some((&label, &(_, _, pos))) = rings.iter().next() {
            return Err(SmilesError::UnclosedRing { label, pos });
        }

        let mut sums = vec![0u32; self.atoms.len()];
        for e in &self.edges {
            sums[e.u] += e.kind.order();
            sums[e.v] += e.kind.order();
        }
        for (i, atom) in self.atoms.iter_mut().enumerate() {
            if atom.bracket {
                continue;
            }
            atom.hydrogens = implicit_hydrogens(&atom.element, atom.aromatic, sums[i]).ok_or(
                SmilesError::Valence {
                    atom: i,
                    element: atom.element.clone(),
                    valence: sums[i],
                },
            )?;
        }
        let graph = MolecularGraph::from_atoms(self.atoms, self.edges)
            .expect("parser emits valid edges");
        Ok(graph)
    }
}

/// Parses a SMILES string into a skeleton graph (atoms and typed bonds, no
/// node features). Implicit hydrogens are stored on the atoms.
pub fn parse_smiles(s: &str) -> Result<MolecularGraph, SmilesError> {
    let mut g = Parser {
        src: s.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        edges: Vec::new(),
    }
    .parse()?;
    g.smiles = Some(s.to_string());
    Ok(g)
}

fn atom_token(a: &Atom) -> String {
    let organic = matches!(
        a.element.as_str(),
        "B" | "C" | "N" | "O" | "P" | "S" | "F" | "Cl" | "Br" | "I"
    );
    let symbol = if a.aromatic {
        a.element.to_lowercase()
    } else {
        a.element.clone()
    };
    if organic && !a.bracket && a.charge == 0 {
        return symbol;
    }
    let mut s = format!("[{symbol}");
    match a.hydrogens {
        0 => {}
        1 => s.push('H'),
        h => s.push_str(&format!("H{h}")),
    }
    match a.charge {
        0 => {}
        1 => s.push('+'),
        -1 => s.push('-'),
        c if c > 0 => s.push_str(&format!("+{c}")),
        c => s.push_str(&format!("-{}", -c)),
    }
    s.push(']');
    s
}

fn bond_token(kind: BondType, a: &Atom, b: &Atom) -> &'static str {
    match kind {
        BondType::Single if a.aromatic && b.aromatic => "-",
        BondType::Single => "",
        BondType::Double => "=",
        BondType::Triple => "#",
        BondType::Aromatic if a.aromatic && b.aromatic => "",
        BondType::Aromatic => ":",
    }
}

/// Writes a connected skeleton as SMILES by depth-first traversal from atom 0.
/// Parsing the result reproduces the graph up to node order.
pub fn write_smiles(g: &MolecularGraph) -> Option<String> {
    let n = g.num_nodes();
    let atoms = g.atoms();
    if atoms.len() != n {
        return None;
    }
    let mut adj: Vec<Vec<(usize, BondType)>> = vec![Vec::new(); n];
    for e in g.edges() {
        adj[e.u].push((e.v, e.kind));
        adj[e.v].push((e.u, e.kind));
    }
    for list in &mut adj {
        list.sort();
    }

    // Pass 1: spanning tree by DFS; remaining edges become ring closures.
    let mut order = vec![usize::MAX; n];
    let mut parent = vec![usize::MAX; n];
    let mut children: Vec<Vec<(usize, BondType)>> = vec![Vec::new(); n];
    let mut counter = 0;
    let mut stack = vec![0usize];
    while let Some(v) = stack.pop() {
        if order[v] != usize::MAX {
            continue;
        }
        order[v] = counter;
        counter += 1;
        if parent[v] != usize::MAX {
            let p = parent[v];
            let kind = adj[p].iter().find(|(w, _)| *w == v).unwrap().1;
            children[p].push((v, kind));
        }
        for &(w, _) in adj[v].iter().rev() {
            if order[w] == usize::MAX {
                parent[w] = v;
                stack.push(w);
            }
        }
    }
    if counter != n {
        return None;
    }
    // ring closures: (earlier atom, later atom, kind)
    let mut opens: Vec<Vec<(usize, BondType)>> = vec![Vec::new(); n];
    let mut closes: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in g.edges() {
        if parent[e.v] == e.u || parent[e.u] == e.v {
            continue;
        }
        let (a, b) = if order[e.u] < order[e.v] {
            (e.u, e.v)
        } else {
            (e.v, e.u)
        };
        opens[a].push((b, e.kind));
        closes[b].push(a);
    }

    // Pass 2: emit.
    let mut out = String::new();
    let mut labels: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    let mut free: Vec<bool> = vec![true; 100];
    fn label_text(l: u32) -> String {
        if l < 10 {
            l.to_string()
        } else {
            format!("%{l:02}")
        }
    }
    enum Step {
        Atom(usize, Option<(BondType, usize)>),
        Open,
        Close,
    }
    let mut work = vec![Step::Atom(0, None)];
    while let Some(step) = work.pop() {
        let (v, via) = match step {
            Step::Open => {
                out.push('(');
                continue;
            }
            Step::Close => {
                out.push(')');
                continue;
            }
            Step::Atom(v, via) => (v, via),
        };
        if let Some((kind, p)) = via {
            out.push_str(bond_token(kind, &atoms[p], &atoms[v]));
        }
        out.push_str(&atom_token(&atoms[v]));
        for &a in &closes[v] {
            let l = labels.remove(&(a, v))?;
            out.push_str(&label_text(l));
            free[l as usize] = true;
        }
        for &(b, kind) in &opens[v] {
            let l = (1..100).find(|&l| free[l])? as u32;
            free[l as usize] = false;
            labels.insert((v, b), l);
            out.push_str(bond_token(kind, &atoms[v], &atoms[b]));
            out.push_str(&label_text(l));
        }
        let kids = &children[v];
        // last child continues the chain; earlier ones are branches
        for (i, &(c, kind)) in kids.iter().enumerate().rev() {
            if i + 1 == kids.len() {
                work.push(Step::Atom(c, Some((kind, v))));
            } else {
                work.push(Step::Close);
                work.push(Step::Atom(c, Some((kind, v))));
                work.push(Step::Open);
            }
        }
    }
    Some(out)
}
