use metagraph::{grad, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fd_check;

/// A primitive under test: input shapes and a scalar function exercising it.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: fn(&[Tensor]) -> Tensor,
}

fn sq(t: Tensor) -> Tensor {
    t.mul(&t).unwrap().sum().unwrap()
}

/// Smooth, nonlinear weighting so every coordinate has a distinct gradient.
fn weigh(t: Tensor) -> Tensor {
    let n = t.numel();
    let w = Tensor::new(t.shape().to_vec(), (0..n).map(|i| 0.3 + (i as f64 * 0.7).sin()).collect()).unwrap();
    t.mul(&w).unwrap().sum().unwrap().add(&sq(t)).unwrap()
}

pub fn op_cases() -> Vec<OpCase> {
    let m = |r: usize, c: usize| vec![r, c];
    vec![
        OpCase { name: "add", shapes: vec![m(3, 4), m(3, 4)], f: |x| weigh(x[0].add(&x[1]).unwrap()) },
        OpCase { name: "sub", shapes: vec![m(3, 4), m(3, 4)], f: |x| weigh(x[0].sub(&x[1]).unwrap()) },
        OpCase { name: "mul", shapes: vec![m(3, 4), m(3, 4)], f: |x| weigh(x[0].mul(&x[1]).unwrap()) },
        OpCase {
            name: "div",
            shapes: vec![m(3, 4), m(3, 4)],
            f: |x| weigh(x[0].div(&x[1].mul(&x[1]).unwrap().add(&Tensor::scalar(0.5)).unwrap()).unwrap()),
        },
        OpCase { name: "scalar_broadcast", shapes: vec![vec![], m(2, 3)], f: |x| weigh(x[0].mul(&x[1]).unwrap()) },
        OpCase { name: "scale", shapes: vec![m(2, 3)], f: |x| weigh(x[0].scale(-1.7).unwrap()) },
        OpCase { name: "sigmoid", shapes: vec![m(3, 4)], f: |x| weigh(x[0].sigmoid().unwrap()) },
        OpCase { name: "tanh", shapes: vec![m(3, 4)], f: |x| weigh(x[0].tanh().unwrap()) },
        OpCase { name: "exp", shapes: vec![m(3, 4)], f: |x| weigh(x[0].exp().unwrap()) },
        OpCase {
            name: "log",
            shapes: vec![m(3, 4)],
            f: |x| weigh(x[0].mul(&x[0]).unwrap().add(&Tensor::scalar(0.5)).unwrap().ln().unwrap()),
        },
        OpCase { name: "neg", shapes: vec![m(3, 4)], f: |x| weigh(x[0].neg().unwrap()) },
        OpCase { name: "matmul", shapes: vec![m(3, 4), m(4, 2)], f: |x| weigh(x[0].matmul(&x[1]).unwrap()) },
        OpCase { name: "transpose", shapes: vec![m(3, 4)], f: |x| weigh(x[0].transpose().unwrap()) },
        OpCase { name: "reduce_sum", shapes: vec![m(3, 4)], f: |x| sq(x[0].sum().unwrap()).add(&weigh(x[0].clone())).unwrap() },
        OpCase { name: "sum_axis0", shapes: vec![m(3, 4)], f: |x| weigh(x[0].sum_axis(0).unwrap()) },
        OpCase { name: "sum_axis1", shapes: vec![m(3, 4)], f: |x| weigh(x[0].sum_axis(1).unwrap()) },
        OpCase { name: "expand_axis", shapes: vec![vec![4]], f: |x| weigh(x[0].expand_axis(0, 3).unwrap()) },
        OpCase { name: "gather_rows", shapes: vec![m(4, 3)], f: |x| weigh(x[0].gather_rows(&[3, 0, 3, 1, 1]).unwrap()) },
        OpCase {
            name: "segment_sum",
            shapes: vec![m(5, 3)],
            f: |x| weigh(x[0].segment_sum(&[2, 0, 2, 1, 2], 4).unwrap()),
        },
        OpCase {
            name: "concat",
            shapes: vec![m(2, 3), m(2, 2)],
            f: |x| weigh(Tensor::concat(&[&x[0], &x[1]], 1).unwrap()),
        },
        OpCase { name: "slice", shapes: vec![m(4, 3)], f: |x| weigh(x[0].slice(0, 1, 3).unwrap()) },
        OpCase { name: "reshape", shapes: vec![m(3, 4)], f: |x| weigh(x[0].reshape([2, 6]).unwrap()) },
        OpCase {
            name: "dropout",
            shapes: vec![m(3, 4)],
            f: |x| weigh(x[0].dropout(0.4, true, &mut ChaCha8Rng::seed_from_u64(7)).unwrap()),
        },
        OpCase {
            name: "bce_with_logits",
            shapes: vec![vec![6]],
            f: |x| x[0].scale(2.0).unwrap().bce_with_logits(&[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap(),
        },
        OpCase {
            name: "masked_bce_with_logits",
            shapes: vec![m(2, 3)],
            f: |x| {
                x[0].scale(2.0)
                    .unwrap()
                    .masked_bce_with_logits(&[1.0, 0.0, 1.0, 0.0, 1.0, 1.0], &[1.0, 1.0, 0.0, 1.0, 0.0, 1.0])
                    .unwrap()
            },
        },
    ]
}

pub fn random_inputs(shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            Tensor::new(s.clone(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
        })
        .collect()
}

/// First-order check of one case on one random instance.
pub fn check_first_order(case: &OpCase, seed: u64) -> Result<f64, String> {
    fd_check(&random_inputs(&case.shapes, seed), case.f, 1e-5, 1e-8, None).map_err(|e| format!("{}: {e}", case.name))
}

/// Checks the gradient of `sum(w * grad f)`, which only comes out right when
/// the backward pass of `f` is itself differentiable.
pub fn check_second_order(case: &OpCase, seed: u64) -> Result<f64, String> {
    let inputs = random_inputs(&case.shapes, seed);
    let weights = random_inputs(&case.shapes, seed ^ 0x5eed);
    let f = case.f;
    let h = |xs: &[Tensor]| {
        let tape = Tape::new();
        let xs: Vec<Tensor> = if xs.iter().all(Tensor::is_tracked) {
            xs.to_vec()
        } else {
            xs.iter().map(|t| tape.var(t)).collect()
        };
        let refs: Vec<&Tensor> = xs.iter().collect();
        let gs = grad(&f(&xs), &refs, true).unwrap();
        gs.iter()
            .zip(&weights)
            .map(|(g, w)| g.mul(w).unwrap().sum().unwrap())
            .reduce(|a, b| a.add(&b).unwrap())
            .unwrap()
    };
    fd_check(&inputs, h, 1e-5, 1e-8, None).map_err(|e| format!("{} (second order): {e}", case.name))
}
