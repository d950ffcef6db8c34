#![allow(dead_code)]

pub mod autodiff;

use metagraph::chemgraph::{BondType, Edge, MolecularGraph};
use metagraph::{grad, ParamSet, Tape, Tensor};
use rand::{Rng, SeedableRng};

#[derive(Debug)]
pub struct FdFailure {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

impl std::fmt::Display for FdFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "input {} coord {}: analytic {:e} numeric {:e} rel {:e}",
            self.input, self.coord, self.analytic, self.numeric, self.rel
        )
    }
}

pub const FD_STEP: f64 = 1e-6;

/// Central-difference check of `f` at every coordinate of `inputs` (or a
/// sample of `max_coords` per tensor). Passes when the absolute error is below
/// `abs_floor` or the relative error is below `rel_tol`. Returns the worst
/// relative error seen among coordinates that missed the absolute floor.
pub fn fd_check<F>(
    inputs: &[Tensor],
    f: F,
    rel_tol: f64,
    abs_floor: f64,
    max_coords: Option<(usize, u64)>,
) -> Result<f64, FdFailure>
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let tape = Tape::new();
    let vars: Vec<Tensor> = inputs.iter().map(|t| tape.var(t)).collect();
    let out = f(&vars);
    let refs: Vec<&Tensor> = vars.iter().collect();
    let analytic = grad(&out, &refs, false).expect("analytic gradient");
    let mut worst: f64 = 0.0;
    let mut sampler = rand_chacha::ChaCha8Rng::seed_from_u64(max_coords.map_or(0, |m| m.1));
    for (i, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match max_coords {
            Some((n, _)) if n < x.numel() => (0..n).map(|_| sampler.gen_range(0..x.numel())).collect(),
            _ => (0..x.numel()).collect(),
        };
        for j in coords {
            let eval = |delta: f64| {
                let mut moved: Vec<Tensor> = inputs.to_vec();
                let mut data = x.to_vec();
                data[j] += delta;
                moved[i] = Tensor::new(x.shape().to_vec(), data).unwrap();
                f(&moved).item()
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic[i].data()[j];
            let abs = (a - numeric).abs();
            if abs < abs_floor {
                continue;
            }
            let rel = abs / a.abs().max(numeric.abs());
            worst = worst.max(rel);
            if rel >= rel_tol {
                return Err(FdFailure {
                    input: i,
                    coord: j,
                    analytic: a,
                    numeric,
                    rel,
                });
            }
        }
    }
    Ok(worst)
}

/// Same as [`fd_check`] with inputs taken from a named parameter set.
pub fn fd_check_params<F>(
    params: &ParamSet,
    f: F,
    rel_tol: f64,
    abs_floor: f64,
    max_coords: Option<(usize, u64)>,
) -> Result<f64, String>
where
    F: Fn(&ParamSet) -> Tensor,
{
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let tensors: Vec<Tensor> = params.tensors().cloned().collect();
    fd_check(
        &tensors,
        |ts| {
            let p: ParamSet = names.iter().cloned().zip(ts.iter().cloned()).collect();
            f(&p)
        },
        rel_tol,
        abs_floor,
        max_coords,
    )
    .map_err(|e| format!("{}: {e}", names[e.input]))
}

/// Random connected graph with explicit node features.
pub fn random_graph<R: Rng>(rng: &mut R, nodes: usize, width: usize) -> MolecularGraph {
    let features = (0..nodes * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut edges: Vec<Edge> = (1..nodes)
        .map(|v| Edge {
            u: rng.gen_range(0..v),
            v,
            kind: BondType::from_index(rng.gen_range(0..4)).unwrap(),
        })
        .collect();
    if nodes >= 4 && rng.gen_bool(0.5) {
        let (u, v) = (0, nodes - 1);
        if !edges.iter().any(|e| e.u == u && e.v == v) {
            edges.push(Edge { u, v, kind: BondType::Single });
        }
    }
    MolecularGraph::from_features(nodes, width, features, edges).unwrap()
}

pub fn random_permutation<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(p.as_mut_slice(), rng);
    p
}

use metagraph::chemgraph::{
    build_registry, synthesize_tasks, BfCounts, RegistryConfig, SynthSpec, TaskRegistry, TypeCounts,
    NUM_ATOM_FEATURES,
};
use metagraph::ggnn::ModelConfig;

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        layers: 2,
        feature_width: NUM_ATOM_FEATURES,
        hidden_width: 16,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Synthetic motif tasks split into train/val/test by type, small molecules.
pub fn synthetic_registry(seed: u64, counts: TypeCounts, val: BfCounts, test: BfCounts) -> TaskRegistry {
    let spec = SynthSpec {
        task_counts: counts,
        instances_per_task: 128,
        min_atoms: 6,
        max_atoms: 14,
        ..SynthSpec::default()
    };
    let data = synthesize_tasks(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let config = RegistryConfig {
        val_counts: val,
        test_counts: test,
        seed,
        ..RegistryConfig::default()
    };
    build_registry(data.tasks().unwrap(), &config).unwrap()
}

pub fn bf(b: usize, f: usize) -> BfCounts {
    BfCounts { b, f }
}

pub fn counts(b: usize, f: usize) -> TypeCounts {
    TypeCounts {
        binding: b,
        functional: f,
        ..TypeCounts::default()
    }
}
