use std::sync::Arc;

use rand::Rng;

use super::tape::Tape;
use super::{Tensor, TensorError, TensorResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Neg,
}

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Binary(BinaryKind),
    Unary(UnaryKind),
    MatMul,
    Transpose,
    SumAll,
    SumAxis(usize),
    ExpandAxis(usize),
    GatherRows(Arc<Vec<usize>>),
    SegmentSum(Arc<Vec<usize>>),
    Concat { axis: usize, sizes: Vec<usize> },
    Slice { axis: usize, start: usize, stop: usize },
    Reshape,
    Bce { labels: Arc<Vec<f64>>, weights: Arc<Vec<f64>> },
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// (outer, extent, inner) strides around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn out(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::from_parts(shape, Arc::new(data))
}

impl Tensor {
    pub fn binary(&self, kind: BinaryKind, other: &Tensor) -> TensorResult<Tensor> {
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |a, b| a + b,
            BinaryKind::Sub => |a, b| a - b,
            BinaryKind::Mul => |a, b| a * b,
            BinaryKind::Div => |a, b| a / b,
        };
        if kind == BinaryKind::Div {
            if let Some(i) = other.data().iter().position(|&b| b == 0.0) {
                return Err(TensorError::DivisionByZero(i));
            }
        }
        let (a, b) = (self.data(), other.data());
        let (shape, data) = if self.shape() == other.shape() {
            (
                self.shape().to_vec(),
                a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            )
        } else if self.is_scalar() {
            let x = a[0];
            (other.shape().to_vec(), b.iter().map(|&y| f(x, y)).collect())
        } else if other.is_scalar() {
            let y = b[0];
            (self.shape().to_vec(), a.iter().map(|&x| f(x, y)).collect())
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "binary",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        };
        Tape::record(Op::Binary(kind), &[self, other], out(shape, data))
    }

    pub fn add(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.binary(BinaryKind::Add, other)
    }

    pub fn sub(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.binary(BinaryKind::Sub, other)
    }

    pub fn mul(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.binary(BinaryKind::Mul, other)
    }

    pub fn div(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.binary(BinaryKind::Div, other)
    }

    pub fn scale(&self, factor: f64) -> TensorResult<Tensor> {
        self.mul(&Tensor::scalar(factor))
    }

    pub fn unary(&self, kind: UnaryKind) -> TensorResult<Tensor> {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => {
                if let Some(&x) = self.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                    return Err(TensorError::Domain {
                        op: "log",
                        detail: format!("non-positive input {x}"),
                    });
                }
                f64::ln
            }
            UnaryKind::Neg => |x| -x,
        };
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tape::record(Op::Unary(kind), &[self], out(self.shape().to_vec(), data))
    }

    pub fn sigmoid(&self) -> TensorResult<Tensor> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn tanh(&self) -> TensorResult<Tensor> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn exp(&self) -> TensorResult<Tensor> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(&self) -> TensorResult<Tensor> {
        self.unary(UnaryKind::Log)
    }

    pub fn neg(&self) -> TensorResult<Tensor> {
        self.unary(UnaryKind::Neg)
    }

    pub fn matmul(&self, other: &Tensor) -> TensorResult<Tensor> {
        let (&[m, k], &[k2, n]) = (self.shape(), other.shape()) else {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let (a, b) = (self.data(), other.data());
        let mut c = vec![0.0; m * n];
        for (i, row) in c.chunks_exact_mut(n).enumerate() {
            for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                for (cij, &bpj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cij += aip * bpj;
                }
            }
        }
        Tape::record(Op::MatMul, &[self, other], out(vec![m, n], c))
    }

    pub fn transpose(&self) -> TensorResult<Tensor> {
        let &[m, n] = self.shape() else {
            return Err(TensorError::Rank {
                op: "transpose",
                expected: 2,
                shape: self.shape().to_vec(),
            });
        };
        let a = self.data();
        let mut t = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                t[j * m + i] = a[i * n + j];
            }
        }
        Tape::record(Op::Transpose, &[self], out(vec![n, m], t))
    }

    pub fn sum(&self) -> TensorResult<Tensor> {
        let s = self.data().iter().sum();
        Tape::record(Op::SumAll, &[self], Tensor::scalar(s))
    }

    pub fn sum_axis(&self, axis: usize) -> TensorResult<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "sum_axis",
                axis,
                rank: self.rank(),
            });
        }
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut s = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in s[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Tape::record(Op::SumAxis(axis), &[self], out(shape, s))
    }

    /// Sum over every axis, or along one axis when given.
    pub fn reduce_sum(&self, axis: Option<usize>) -> TensorResult<Tensor> {
        match axis {
            None => self.sum(),
            Some(a) => self.sum_axis(a),
        }
    }

    /// Inserts a new axis of extent `len` at `axis`, repeating the values.
    pub fn expand_axis(&self, axis: usize, len: usize) -> TensorResult<Tensor> {
        if axis > self.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "expand_axis",
                axis,
                rank: self.rank(),
            });
        }
        let mut shape = self.shape().to_vec();
        shape.insert(axis, len);
        if len == 0 {
            return Err(TensorError::ZeroExtent(shape));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis..].iter().product();
        let x = self.data();
        let mut e = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let chunk = &x[o * inner..(o + 1) * inner];
            for _ in 0..len {
                e.extend_from_slice(chunk);
            }
        }
        Tape::record(Op::ExpandAxis(axis), &[self], out(shape, e))
    }

    fn rows(&self, op: &'static str) -> TensorResult<(usize, usize)> {
        if self.rank() == 0 {
            return Err(TensorError::Rank {
                op,
                expected: 1,
                shape: self.shape().to_vec(),
            });
        }
        let n = self.shape()[0];
        Ok((n, self.numel() / n))
    }

    /// Selects rows (axis 0) by index; rows may repeat.
    pub fn gather_rows(&self, indices: &[usize]) -> TensorResult<Tensor> {
        self.gather_rows_shared(Arc::new(indices.to_vec()))
    }

    pub(crate) fn gather_rows_shared(&self, indices: Arc<Vec<usize>>) -> TensorResult<Tensor> {
        let (n, width) = self.rows("gather_rows")?;
        if indices.is_empty() {
            return Err(TensorError::ZeroExtent(vec![0]));
        }
        let x = self.data();
        let mut g = Vec::with_capacity(indices.len() * width);
        for &i in indices.iter() {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: n,
                });
            }
            g.extend_from_slice(&x[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        Tape::record(Op::GatherRows(indices), &[self], out(shape, g))
    }

    /// Row `r` of the result is the sum of rows whose segment id is `r`.
    pub fn segment_sum(&self, segment_ids: &[usize], num_segments: usize) -> TensorResult<Tensor> {
        self.segment_sum_shared(Arc::new(segment_ids.to_vec()), num_segments)
    }

    pub(crate) fn segment_sum_shared(
        &self,
        ids: Arc<Vec<usize>>,
        num: usize,
    ) -> TensorResult<Tensor> {
        let (e, width) = self.rows("segment_sum")?;
        if ids.len() != e {
            return Err(TensorError::LengthMismatch {
                op: "segment_sum",
                left: ids.len(),
                right: e,
            });
        }
        let mut shape = self.shape().to_vec();
        shape[0] = num;
        if num == 0 {
            return Err(TensorError::ZeroExtent(shape));
        }
        let x = self.data();
        let mut s = vec![0.0; num * width];
        for (row, &id) in ids.iter().enumerate() {
            if id >= num {
                return Err(TensorError::IndexOutOfRange {
                    op: "segment_sum",
                    index: id,
                    bound: num,
                });
            }
            let dst = &mut s[id * width..(id + 1) * width];
            for (acc, &v) in dst.iter_mut().zip(&x[row * width..(row + 1) * width]) {
                *acc += v;
            }
        }
        Tape::record(Op::SegmentSum(ids), &[self], out(shape, s))
    }

    pub fn concat(tensors: &[&Tensor], axis: usize) -> TensorResult<Tensor> {
        let first = tensors.first().ok_or(TensorError::ZeroExtent(vec![0]))?;
        if axis >= first.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: first.rank(),
            });
        }
        for t in &tensors[1..] {
            let compatible = t.rank() == first.rank()
                && t
                    .shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let total: usize = sizes.iter().sum();
        let mut c = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &len) in tensors.iter().zip(&sizes) {
                c.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Tape::record(Op::Concat { axis, sizes }, tensors, out(shape, c))
    }

    /// Half-open range `[start, stop)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, stop: usize) -> TensorResult<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "slice",
                axis,
                rank: self.rank(),
            });
        }
        let extent = self.shape()[axis];
        if start >= stop || stop > extent {
            return Err(TensorError::SliceOutOfBounds {
                start,
                stop,
                extent,
            });
        }
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut s = Vec::with_capacity(outer * (stop - start) * inner);
        for o in 0..outer {
            s.extend_from_slice(&x[(o * len + start) * inner..(o * len + stop) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = stop - start;
        Tape::record(Op::Slice { axis, start, stop }, &[self], out(shape, s))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> TensorResult<Tensor> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape().to_vec(),
                right: shape,
            });
        }
        Tape::record(
            Op::Reshape,
            &[self],
            Tensor::from_parts(shape, Arc::clone(self.data_arc())),
        )
    }

    /// Inverted dropout. The mask comes from `rng` only and is a constant, so
    /// gradients flow through the same mask.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, training: bool, rng: &mut R) -> TensorResult<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability(p));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mul(&out(self.shape().to_vec(), mask))
    }

    /// Mean binary cross-entropy on logits, in the overflow-free form
    /// `max(z,0) - z*y + ln(1 + e^-|z|)`.
    pub fn bce_with_logits(&self, labels: &[f64]) -> TensorResult<Tensor> {
        self.masked_bce_with_logits(labels, &vec![1.0; labels.len()])
    }

    /// Binary cross-entropy over the entries where `mask` is 1, divided by the
    /// number of such entries. Labels under a zero mask are never read.
    pub fn masked_bce_with_logits(&self, labels: &[f64], mask: &[f64]) -> TensorResult<Tensor> {
        if labels.len() != self.numel() || mask.len() != self.numel() {
            return Err(TensorError::LengthMismatch {
                op: "bce_with_logits",
                left: self.numel(),
                right: if labels.len() != self.numel() {
                    labels.len()
                } else {
                    mask.len()
                },
            });
        }
        let count: f64 = mask.iter().filter(|&&m| m != 0.0).count() as f64;
        if count == 0.0 {
            return Err(TensorError::EmptyMask);
        }
        let mut total = 0.0;
        let mut clean = Vec::with_capacity(labels.len());
        let mut weights = Vec::with_capacity(labels.len());
        for (i, ((&z, &y), &m)) in self.data().iter().zip(labels).zip(mask).enumerate() {
            if m == 0.0 {
                clean.push(0.0);
                weights.push(0.0);
                continue;
            }
            if y != 0.0 && y != 1.0 {
                return Err(TensorError::NonBinaryLabel { index: i, value: y });
            }
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            clean.push(y);
            weights.push(1.0 / count);
        }
        Tape::record(
            Op::Bce {
                labels: Arc::new(clean),
                weights: Arc::new(weights),
            },
            &[self],
            Tensor::scalar(total / count),
        )
    }
}

/// Reduces a broadcast gradient back to the shape of a rank-0 operand.
fn fit(g: Tensor, target: &Tensor) -> TensorResult<Tensor> {
    if target.is_scalar() && !g.is_scalar() {
        g.sum()
    } else {
        Ok(g)
    }
}

/// Backward rules, written with recorded primitives so they can be
/// differentiated again. `wants[i]` marks inputs whose gradient is needed.
pub(crate) fn backward(
    op: &Op,
    g: &Tensor,
    xs: &[Tensor],
    y: &Tensor,
    wants: &[bool],
) -> TensorResult<Vec<Option<Tensor>>> {
    let want = |i: usize| wants.get(i).copied().unwrap_or(false);
    let grads = match op {
        Op::Leaf => vec![],
        Op::Binary(kind) => {
            let (a, b) = (&xs[0], &xs[1]);
            let (ga, gb) = match kind {
                BinaryKind::Add => (
                    want(0).then(|| Ok(g.clone())),
                    want(1).then(|| Ok(g.clone())),
                ),
                BinaryKind::Sub => (want(0).then(|| Ok(g.clone())), want(1).then(|| g.neg())),
                BinaryKind::Mul => (want(0).then(|| g.mul(b)), want(1).then(|| g.mul(a))),
                BinaryKind::Div => (
                    want(0).then(|| g.div(b)),
                    want(1).then(|| g.mul(a)?.div(&b.mul(b)?)?.neg()),
                ),
            };
            vec![
                ga.transpose()?.map(|t| fit(t, a)).transpose()?,
                gb.transpose()?.map(|t| fit(t, b)).transpose()?,
            ]
        }
        Op::Unary(kind) => {
            let x = &xs[0];
            let d = match kind {
                UnaryKind::Sigmoid => g.mul(&y.mul(&Tensor::scalar(1.0).sub(y)?)?)?,
                UnaryKind::Tanh => g.mul(&Tensor::scalar(1.0).sub(&y.mul(y)?)?)?,
                UnaryKind::Exp => g.mul(y)?,
                UnaryKind::Log => g.div(x)?,
                UnaryKind::Neg => g.neg()?,
            };
            vec![Some(d)]
        }
        Op::MatMul => {
            let (a, b) = (&xs[0], &xs[1]);
            let ga = want(0).then(|| g.matmul(&b.transpose()?)).transpose()?;
            let gb = want(1).then(|| a.transpose()?.matmul(g)).transpose()?;
            vec![ga, gb]
        }
        Op::Transpose => vec![Some(g.transpose()?)],
        Op::SumAll => {
            let x = &xs[0];
            let mut e = g.clone();
            for (axis, &len) in x.shape().iter().enumerate() {
                e = e.expand_axis(axis, len)?;
            }
            vec![Some(e)]
        }
        Op::SumAxis(axis) => vec![Some(g.expand_axis(*axis, xs[0].shape()[*axis])?)],
        Op::ExpandAxis(axis) => vec![Some(g.sum_axis(*axis)?)],
        Op::GatherRows(indices) => {
            let n = xs[0].shape()[0];
            vec![Some(g.segment_sum_shared(Arc::clone(indices), n)?)]
        }
        Op::SegmentSum(ids) => vec![Some(g.gather_rows_shared(Arc::clone(ids))?)],
        Op::Concat { axis, sizes } => {
            let mut start = 0;
            let mut parts = Vec::with_capacity(sizes.len());
            for (i, &len) in sizes.iter().enumerate() {
                parts.push(want(i).then(|| g.slice(*axis, start, start + len)).transpose()?);
                start += len;
            }
            parts
        }
        Op::Slice { axis, start, stop } => {
            let x = &xs[0];
            let extent = x.shape()[*axis];
            let pad = |len: usize| {
                let mut shape = x.shape().to_vec();
                shape[*axis] = len;
                Tensor::zeros(shape)
            };
            let before = (*start > 0).then(|| pad(*start)).transpose()?;
            let after = (*stop < extent).then(|| pad(extent - stop)).transpose()?;
            let mut pieces: Vec<&Tensor> = Vec::with_capacity(3);
            pieces.extend(before.as_ref());
            pieces.push(g);
            pieces.extend(after.as_ref());
            vec![Some(Tensor::concat(&pieces, *axis)?)]
        }
        Op::Reshape => vec![Some(g.reshape(xs[0].shape().to_vec())?)],
        Op::Bce { labels, weights } => {
            let z = &xs[0];
            let shape = z.shape().to_vec();
            let labels = Tensor::from_parts(shape.clone(), Arc::clone(labels));
            let weights = Tensor::from_parts(shape, Arc::clone(weights));
            vec![Some(z.sigmoid()?.sub(&labels)?.mul(&weights)?.mul(g)?)]
        }
    };
    Ok(grads)
}
