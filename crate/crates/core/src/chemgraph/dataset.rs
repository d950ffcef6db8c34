//! JSON Lines dataset files. One molecule per line:
//! `{"id", "smiles"?, "nodes"?, "edges", "labels": {task: 0|1}}`, with exactly
//! one of `smiles` or `nodes`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{featurize, parse_smiles, BondType, Edge, MolecularGraph};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Molecule {
    pub graph: Arc<MolecularGraph>,
    pub labels: BTreeMap<String, u8>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    smiles: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nodes: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edges: Option<Vec<[usize; 3]>>,
    labels: BTreeMap<String, u8>,
}

fn to_edges(raw: &[[usize; 3]]) -> Result<Vec<Edge>> {
    raw.iter()
        .map(|&[u, v, k]| {
            let kind = BondType::from_index(k)
                .ok_or_else(|| Error::data(format!("edge type {k} out of range")))?;
            Ok(Edge { u, v, kind })
        })
        .collect()
}

fn sorted_edges(edges: &[Edge]) -> Vec<Edge> {
    let mut e = edges.to_vec();
    e.sort();
    e
}

fn decode(record: Record) -> Result<Molecule> {
    if let Some((task, &y)) = record.labels.iter().find(|(_, &y)| y > 1) {
        return Err(Error::data(format!("label {y} for task `{task}` is not binary")));
    }
    let graph = match (record.smiles, record.nodes) {
        (Some(smiles), None) => {
            let mut g = featurize(&parse_smiles(&smiles)?);
            if let Some(raw) = &record.edges {
                let mut given = to_edges(raw)?;
                for e in &mut given {
                    if e.u > e.v {
                        std::mem::swap(&mut e.u, &mut e.v);
                    }
                }
                if sorted_edges(&given) != sorted_edges(g.edges()) {
                    return Err(Error::data("edges disagree with the parsed SMILES"));
                }
            }
            g.id = Some(record.id);
            g
        }
        (None, Some(nodes)) => {
            let edges = record
                .edges
                .ok_or_else(|| Error::data("`edges` is required alongside `nodes`"))?;
            let width = nodes.first().map_or(0, Vec::len);
            if nodes.iter().any(|row| row.len() != width) {
                return Err(Error::data("ragged node feature rows"));
            }
            let n = nodes.len();
            let flat = nodes.into_iter().flatten().collect();
            MolecularGraph::from_features(n, width, flat, to_edges(&edges)?)?.with_id(record.id)
        }
        (Some(_), Some(_)) => return Err(Error::data("both `smiles` and `nodes` given")),
        (None, None) => return Err(Error::data("one of `smiles` or `nodes` is required")),
    };
    Ok(Molecule {
        graph: Arc::new(graph),
        labels: record.labels,
    })
}

fn encode(m: &Molecule) -> Result<Record> {
    let g = &m.graph;
    let id = g
        .id
        .clone()
        .ok_or_else(|| Error::data("molecule without an id"))?;
    let edges = Some(g.edges().iter().map(|e| [e.u, e.v, e.kind.index()]).collect());
    let (smiles, nodes) = match &g.smiles {
        Some(s) => (Some(s.clone()), None),
        None => {
            if !g.is_featurized() {
                return Err(Error::data(format!("molecule `{id}` has neither SMILES nor features")));
            }
            let rows = (0..g.num_nodes()).map(|v| g.node_features(v).to_vec()).collect();
            (None, Some(rows))
        }
    };
    Ok(Record {
        id,
        smiles,
        nodes,
        edges,
        labels: m.labels.clone(),
    })
}

pub fn read_dataset<R: Read>(reader: R) -> Result<Vec<Molecule>> {
    let mut out = Vec::new();
    let mut width: Option<usize> = None;
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let record: Record = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("line {lineno}: {e}")))?;
        let m = decode(record).map_err(|e| Error::data(format!("line {lineno}: {e}")))?;
        let w = m.graph.feature_width();
        match width {
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(Error::data(format!(
                    "line {lineno}: feature width {w} differs from {expected}"
                )))
            }
            _ => {}
        }
        out.push(m);
    }
    Ok(out)
}

pub fn write_dataset<W: Write>(writer: W, molecules: &[Molecule]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for m in molecules {
        serde_json::to_writer(&mut w, &encode(m)?)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Molecule>> {
    read_dataset(File::open(path)?)
}

pub fn save_dataset(path: impl AsRef<Path>, molecules: &[Molecule]) -> Result<()> {
    write_dataset(File::create(path)?, molecules)
}
