//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every exported function takes plain numbers or strings and returns a JSON
//! string, so the page needs no bindings beyond `JSON.parse`. The same logic is
//! available natively through the `*_view` functions.

use metagraph::chemgraph::{featurize, parse_smiles, write_smiles, BondType, ELEMENTS, NUM_ATOM_FEATURES};
use metagraph::evalbench::auprc;
use metagraph::metalearn::{meta_update, Algorithm, Episode, MetaConfig, OuterOptimizer, OuterState, QuadraticSurrogate};
use rand::rngs::mock::StepRng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AtomView {
    pub element: String,
    pub aromatic: bool,
    pub hydrogens: u32,
    pub charge: i32,
    pub degree: usize,
    /// Indices of the non-zero feature slots.
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BondView {
    pub u: usize,
    pub v: usize,
    pub kind: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MoleculeView {
    pub smiles: String,
    pub atoms: Vec<AtomView>,
    pub bonds: Vec<BondView>,
    pub feature_width: usize,
    /// Column sums of the feature matrix: what a sum readout sees before any
    /// message passing.
    pub pooled: Vec<f64>,
    pub feature_names: Vec<String>,
}

fn bond_name(kind: BondType) -> &'static str {
    match kind {
        BondType::Single => "single",
        BondType::Double => "double",
        BondType::Triple => "triple",
        BondType::Aromatic => "aromatic",
    }
}

/// Human-readable label for every slot of the 75-wide atom feature vector.
pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = ELEMENTS.iter().map(|e| format!("element {e}")).collect();
    names.push("element other".into());
    names.extend((0..=10).map(|d| format!("degree {d}")));
    names.extend((0..=6).map(|h| format!("hydrogens {h}")));
    names.push("formal charge".into());
    names.extend(["sp", "sp2", "sp3", "aromatic", "other"].map(|h| format!("hybridization {h}")));
    names.push("aromatic".into());
    names.extend((0..=4).map(|v| format!("valence {v}")));
    names
}

pub fn molecule_view(smiles: &str) -> Result<MoleculeView, String> {
    let graph = featurize(&parse_smiles(smiles.trim()).map_err(|e| e.to_string())?);
    let n = graph.num_nodes();
    let width = graph.feature_width();
    let mut pooled = vec![0.0; width];
    let atoms = (0..n)
        .map(|v| {
            let row = graph.node_features(v);
            for (p, x) in pooled.iter_mut().zip(row) {
                *p += x;
            }
            let atom = &graph.atoms()[v];
            AtomView {
                element: atom.element.clone(),
                aromatic: atom.aromatic,
                hydrogens: atom.hydrogens,
                charge: atom.charge,
                degree: graph.edges().iter().filter(|e| e.u == v || e.v == v).count(),
                active: row.iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(i, _)| i).collect(),
            }
        })
        .collect();
    let bonds = graph
        .edges()
        .iter()
        .map(|e| BondView {
            u: e.u,
            v: e.v,
            kind: bond_name(e.kind),
        })
        .collect();
    Ok(MoleculeView {
        smiles: write_smiles(&graph).unwrap_or_else(|| smiles.trim().to_string()),
        atoms,
        bonds,
        feature_width: width.max(NUM_ATOM_FEATURES),
        pooled: if n == 0 { vec![0.0; NUM_ATOM_FEATURES] } else { pooled },
        feature_names: feature_names(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub theta: f64,
    pub meta_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurrogateView {
    pub maml: Vec<TrajectoryPoint>,
    pub fomaml: Vec<TrajectoryPoint>,
    /// Shared minimizer of both objectives: the mean task center.
    pub optimum: f64,
}

/// Outer-loop SGD on the quadratic surrogate, one task per center, one inner
/// step. Point `i` holds the parameter before update `i` and the meta-loss
/// evaluated there; the last point has no update after it.
pub fn surrogate_view(
    centers: &[f64],
    inner_lr: f64,
    outer_lr: f64,
    start: f64,
    steps: usize,
) -> Result<SurrogateView, String> {
    if centers.is_empty() {
        return Err("need at least one task center".into());
    }
    if steps > 10_000 {
        return Err("at most 10000 steps".into());
    }
    let episodes: Vec<Episode<f64>> = centers
        .iter()
        .enumerate()
        .map(|(i, &c)| Episode {
            task_id: format!("task{i}"),
            support: vec![c],
            query: vec![c],
        })
        .collect();
    let run = |algorithm: Algorithm| -> Result<Vec<TrajectoryPoint>, String> {
        let config = MetaConfig {
            algorithm,
            inner_lr,
            inner_steps: 1,
            outer_lr: Some(outer_lr),
            outer_optimizer: OuterOptimizer::Sgd,
            ..MetaConfig::default()
        };
        let mut rng = StepRng::new(0, 1);
        let mut params = QuadraticSurrogate::params(start);
        let mut state = OuterState::new(&params, &config);
        let mut points = Vec::with_capacity(steps + 1);
        for _ in 0..=steps {
            let theta = params.require("theta").map_err(|e| e.to_string())?.item();
            let (next, next_state, metrics) =
                meta_update(&QuadraticSurrogate, &params, &state, &episodes, &config, &mut rng).map_err(|e| e.to_string())?;
            points.push(TrajectoryPoint {
                theta,
                meta_loss: metrics.meta_loss,
            });
            params = next;
            state = next_state;
        }
        Ok(points)
    };
    Ok(SurrogateView {
        maml: run(Algorithm::Maml)?,
        fomaml: run(Algorithm::Fomaml)?,
        optimum: centers.iter().sum::<f64>() / centers.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrView {
    pub auprc: f64,
    pub prevalence: f64,
    /// One point per distinct score, from the highest threshold down.
    pub curve: Vec<CurvePoint>,
}

pub fn pr_view(scores: &[f64], labels: &[u8]) -> Result<PrView, String> {
    let area = auprc(scores, labels).map_err(|e| e.to_string())?;
    let positives = labels.iter().filter(|&&y| y == 1).count() as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = Vec::new();
    let (mut tp, mut seen) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += f64::from(labels[order[i]]);
            seen += 1.0;
            i += 1;
        }
        curve.push(CurvePoint {
            threshold: s,
            recall: tp / positives,
            precision: tp / seen,
        });
    }
    Ok(PrView {
        auprc: area,
        prevalence: positives / labels.len() as f64,
        curve,
    })
}

/// Parses whitespace- or comma-separated numbers.
pub fn parse_numbers(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("`{s}` is not a number")))
        .collect()
}

fn to_json<T: Serialize>(value: Result<T, String>) -> Result<String, JsValue> {
    value
        .and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn describe_molecule(smiles: &str) -> Result<String, JsValue> {
    to_json(molecule_view(smiles))
}

#[wasm_bindgen]
pub fn surrogate_curves(centers: &str, inner_lr: f64, outer_lr: f64, start: f64, steps: usize) -> Result<String, JsValue> {
    to_json(parse_numbers(centers).and_then(|c| surrogate_view(&c, inner_lr, outer_lr, start, steps)))
}

#[wasm_bindgen]
pub fn precision_recall(scores: &str, labels: &str) -> Result<String, JsValue> {
    let labels = parse_numbers(labels).and_then(|ls| {
        ls.into_iter()
            .map(|y| match y {
                0.0 => Ok(0u8),
                1.0 => Ok(1u8),
                other => Err(format!("label {other} is not 0 or 1")),
            })
            .collect::<Result<Vec<_>, _>>()
    });
    to_json(parse_numbers(scores).and_then(|s| labels.and_then(|l| pr_view(&s, &l))))
}
