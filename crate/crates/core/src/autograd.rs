//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and the handles of
//! its inputs. [`Tape::backward`] walks the nodes in exact reverse order of
//! execution and applies each node's local gradient rule. Gradients reaching
//! leaves are accumulated across calls until [`Tape::zero_grads`].

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CerdError, Result};
use crate::tensor::{shape_str, Tensor};

/// Slope of the sigmoid inside the smooth ramp `x·σ(1.702x)`.
pub const GELU_SLOPE: f64 = 1.702;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Abs(Var),
    Softmax { x: Var, temperature: f64 },
    Reduce { x: Var, axis: usize, mean: bool },
    SumAll(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Normalize { x: Var, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    ScaleRows(Var, Var),
    Gather { x: Var, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reduction flavour for [`Tape::reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn softmax_rows(x: &[f64], cols: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = ((xi - max) / temperature).exp();
            total += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= total;
        }
    }
    out
}

/// Numerically stable softmax of a plain slice.
pub fn softmax(x: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(CerdError::Parameter(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if x.is_empty() {
        return Err(CerdError::Dimension("softmax of an empty vector".into()));
    }
    Ok(softmax_rows(x, x.len(), temperature))
}

pub fn sigmoid(x: f64) -> f64 {
    sigmoid_scalar(x)
}

pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    param_cache: HashMap<usize, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// An evaluation-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            param_cache: HashMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// A training-mode tape whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Tape {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Tape::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, present only after a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a trainable parameter once per tape; later calls with the same key
    /// return the cached leaf.
    pub fn param(&mut self, key: usize, value: impl FnOnce() -> Tensor) -> Var {
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let v = self.leaf(value(), true);
        self.param_cache.insert(key, v);
        v
    }

    /// (parameter key, leaf) pairs registered on this tape.
    pub fn params(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.param_cache.iter().map(|(&k, &v)| (k, v))
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CerdError::Dimension(format!(
                "{what}: shapes {} and {} differ",
                shape_str(self.shape(a)),
                shape_str(self.shape(b))
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(CerdError::Dimension(format!(
                "matmul: inner dimensions of {} and {} disagree",
                shape_str(self.shape(a)),
                shape_str(self.shape(b))
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let out = transpose_raw(self.value(a).data(), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), rg))
    }

    fn check_row(&self, x: Var, r: Var, what: &str) -> Result<usize> {
        let last = *self.shape(x).last().unwrap();
        if self.shape(r) != [last] {
            return Err(CerdError::Dimension(format!(
                "{what}: row vector {} does not match trailing dimension of {}",
                shape_str(self.shape(r)),
                shape_str(self.shape(x))
            )));
        }
        Ok(last)
    }

    /// Adds a vector to every row (trailing axis) of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.check_row(x, row, "add_row")?;
        let r = self.value(row).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + r[i % c])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, row]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(x, row), rg))
    }

    /// Multiplies every row (trailing axis) of `x` elementwise by a vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.check_row(x, row, "mul_row")?;
        let r = self.value(row).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * r[i % c])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, row]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MulRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, factor), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    /// Smooth ramp `x·σ(1.702x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid_scalar(GELU_SLOPE * v), Op::Gelu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// Softmax over the trailing axis of `x / temperature`.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(CerdError::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let cols = *self.shape(x).last().unwrap();
        let out = softmax_rows(self.value(x).data(), cols, temperature);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax { x, temperature },
            rg,
        ))
    }

    /// Sum or mean along `axis`; the axis is dropped (a rank-1 input yields shape `[1]`).
    pub fn reduce(&mut self, x: Var, reduction: Reduction, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(CerdError::Dimension(format!(
                "reduce: axis {axis} out of range for shape {}",
                shape_str(&shape)
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        let mean = reduction == Reduction::Mean;
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut new_shape: Vec<usize> = shape[..axis].to_vec();
        new_shape.extend_from_slice(&shape[axis + 1..]);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(new_shape, out),
            Op::Reduce { x, axis, mean },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Reduction::Sum, axis)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Reduction::Mean, axis)
    }

    /// Sum of every entry, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| CerdError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(CerdError::Dimension(format!(
                "concat: axis {axis} out of range for shape {}",
                shape_str(&base)
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(CerdError::Dimension(format!(
                    "concat: shapes {} and {} incompatible along axis {axis}",
                    shape_str(&base),
                    shape_str(s)
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let block = len * inner;
                out.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Entries `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(CerdError::Dimension(format!(
                "slice: range {start}..{} on axis {axis} invalid for shape {}",
                start + len,
                shape_str(&shape)
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(new_shape, out),
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let r = self.slice(x, 0, i, 1)?;
        let c = self.shape(x)[1..].iter().product();
        self.reshape(r, &[c])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape.to_vec(), self.value(x).data().to_vec()).map_err(|_| {
            CerdError::Dimension(format!(
                "reshape: cannot view {} as {}",
                shape_str(self.shape(x)),
                shape_str(shape)
            ))
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Zero-mean, unit-variance normalization over the trailing axis (no affine part).
    pub fn normalize(&mut self, x: Var, eps: f64) -> Var {
        let cols = *self.shape(x).last().unwrap();
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        let mut inv_std = Vec::with_capacity(data.len() / cols);
        for (row, o) in data.chunks(cols).zip(out.chunks_mut(cols)) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = (xi - mean) * inv;
            }
            inv_std.push(inv);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Normalize { x, inv_std },
            rg,
        )
    }

    /// Inverted dropout: at train time entries are zeroed with probability `p` and
    /// survivors scaled by `1/(1-p)`; identity in evaluation mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(CerdError::Parameter(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Dropout { x, mask }, rg))
    }

    /// Mean cross-entropy of row-wise logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if labels.len() != b {
            return Err(CerdError::Dimension(format!(
                "cross_entropy: {} labels for {b} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(CerdError::Label(format!(
                "class index {bad} out of range for {c} classes"
            )));
        }
        let data = self.value(logits).data();
        let probs = softmax_rows(data, c, 1.0);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &data[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= b as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row `r` of matrix `x` multiplied by entry `r` of vector `w`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.shape(w) != [r] {
            return Err(CerdError::Dimension(format!(
                "scale_rows: weights {} do not match rows of {}",
                shape_str(self.shape(w)),
                shape_str(self.shape(x))
            )));
        }
        let wd = self.value(w).data();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * wd[i / c])
            .collect();
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::ScaleRows(x, w), rg))
    }

    /// Picks flat entries of `x` into a vector.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if indices.is_empty() || indices.iter().any(|&i| i >= n) {
            return Err(CerdError::Dimension(format!(
                "gather: indices {indices:?} invalid for {n} entries"
            )));
        }
        let data = self.value(x).data();
        let out = indices.iter().map(|&i| data[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len()], out),
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Populates gradients of every reachable leaf with `∂loss/∂leaf`.
    ///
    /// Gradients accumulate across calls; call [`Tape::zero_grads`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(CerdError::Contract(format!(
                "backward requires a scalar loss, got shape {}",
                shape_str(self.shape(loss))
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
            match &mut grads[v.0] {
                Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        }
        let need = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let out = node.value.data();
            match &node.op {
                Op::Leaf => match &mut self.leaf_grads[i] {
                    Some(lg) => lg.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                },
                &Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let n = nodes[b.0].value.shape()[1];
                    if need(a) {
                        let bt = transpose_raw(val(b), k, n);
                        acc(&mut grads, a, matmul_raw(&g, &bt, m, n, k));
                    }
                    if need(b) {
                        let at = transpose_raw(val(a), m, k);
                        acc(&mut grads, b, matmul_raw(&at, &g, k, m, n));
                    }
                }
                &Op::Transpose(a) => {
                    let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    acc(&mut grads, a, transpose_raw(&g, c, r));
                }
                &Op::Add(a, b) => {
                    if need(a) {
                        acc(&mut grads, a, g.clone());
                    }
                    if need(b) {
                        acc(&mut grads, b, g);
                    }
                }
                &Op::Sub(a, b) => {
                    if need(b) {
                        acc(&mut grads, b, g.iter().map(|v| -v).collect());
                    }
                    if need(a) {
                        acc(&mut grads, a, g);
                    }
                }
                &Op::Mul(a, b) => {
                    if need(a) {
                        acc(&mut grads, a, g.iter().zip(val(b)).map(|(x, y)| x * y).collect());
                    }
                    if need(b) {
                        acc(&mut grads, b, g.iter().zip(val(a)).map(|(x, y)| x * y).collect());
                    }
                }
                &Op::AddRow(x, r) => {
                    let c = val(r).len();
                    if need(r) {
                        let mut gr = vec![0.0; c];
                        g.iter().enumerate().for_each(|(j, v)| gr[j % c] += v);
                        acc(&mut grads, r, gr);
                    }
                    if need(x) {
                        acc(&mut grads, x, g);
                    }
                }
                &Op::MulRow(x, r) => {
                    let rv = val(r);
                    let c = rv.len();
                    if need(r) {
                        let mut gr = vec![0.0; c];
                        g.iter()
                            .zip(val(x))
                            .enumerate()
                            .for_each(|(j, (gv, xv))| gr[j % c] += gv * xv);
                        acc(&mut grads, r, gr);
                    }
                    if need(x) {
                        acc(
                            &mut grads,
                            x,
                            g.iter().enumerate().map(|(j, gv)| gv * rv[j % c]).collect(),
                        );
                    }
                }
                &Op::Scale(x, f) => acc(&mut grads, x, g.iter().map(|v| v * f).collect()),
                &Op::Sigmoid(x) => acc(
                    &mut grads,
                    x,
                    g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect(),
                ),
                &Op::Gelu(x) => acc(
                    &mut grads,
                    x,
                    g.iter()
                        .zip(val(x))
                        .map(|(gv, &xv)| {
                            let s = sigmoid_scalar(GELU_SLOPE * xv);
                            gv * (s + xv * GELU_SLOPE * s * (1.0 - s))
                        })
                        .collect(),
                ),
                &Op::Abs(x) => acc(
                    &mut grads,
                    x,
                    g.iter()
                        .zip(val(x))
                        .map(|(gv, &xv)| {
                            if xv > 0.0 {
                                *gv
                            } else if xv < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                ),
                &Op::Softmax { x, temperature } => {
                    let cols = *node.value.shape().last().unwrap();
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, yr), dst) in g.chunks(cols).zip(out.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = yv * (gv - dot) / temperature;
                        }
                    }
                    acc(&mut grads, x, gx);
                }
                &Op::Reduce { x, axis, mean } => {
                    let shape = nodes[x.0].value.shape();
                    let (outer, len, inner) = split_axis(shape, axis);
                    let f = if mean { 1.0 / len as f64 } else { 1.0 };
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            for n in 0..inner {
                                gx[(o * len + l) * inner + n] = g[o * inner + n] * f;
                            }
                        }
                    }
                    acc(&mut grads, x, gx);
                }
                &Op::SumAll(x) => {
                    let n = nodes[x.0].value.numel();
                    acc(&mut grads, x, vec![g[0]; n]);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                    let mut offset = 0;
                    let mut parts: Vec<Vec<f64>> = inputs
                        .iter()
                        .map(|v| Vec::with_capacity(nodes[v.0].value.numel()))
                        .collect();
                    for _ in 0..outer {
                        for (v, part) in inputs.iter().zip(parts.iter_mut()) {
                            let block = nodes[v.0].value.shape()[*axis] * inner;
                            part.extend_from_slice(&g[offset..offset + block]);
                            offset += block;
                        }
                    }
                    for (&v, part) in inputs.iter().zip(parts) {
                        if need(v) {
                            acc(&mut grads, v, part);
                        }
                    }
                }
                &Op::Slice { x, axis, start } => {
                    let shape = nodes[x.0].value.shape();
                    let (outer, full, inner) = split_axis(shape, axis);
                    let len = node.value.shape()[axis];
                    let mut gx = vec![0.0; outer * full * inner];
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        gx[base..base + len * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    acc(&mut grads, x, gx);
                }
                &Op::Reshape(x) => acc(&mut grads, x, g),
                Op::Normalize { x, inv_std } => {
                    let cols = *node.value.shape().last().unwrap();
                    let mut gx = vec![0.0; g.len()];
                    for (r, ((gr, yr), dst)) in g
                        .chunks(cols)
                        .zip(out.chunks(cols))
                        .zip(gx.chunks_mut(cols))
                        .enumerate()
                    {
                        let mean_g = gr.iter().sum::<f64>() / cols as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = inv_std[r] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Dropout { x, mask } => {
                    acc(&mut grads, *x, g.iter().zip(mask).map(|(a, b)| a * b).collect())
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let mut gx: Vec<f64> = probs.iter().map(|p| p * g[0] / b as f64).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        gx[i * c + l] -= g[0] / b as f64;
                    }
                    acc(&mut grads, *logits, gx);
                }
                &Op::ScaleRows(x, w) => {
                    let wd = val(w);
                    let c = g.len() / wd.len();
                    if need(w) {
                        let gw = g
                            .chunks(c)
                            .zip(val(x).chunks(c))
                            .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                            .collect();
                        acc(&mut grads, w, gw);
                    }
                    if need(x) {
                        acc(
                            &mut grads,
                            x,
                            g.iter().enumerate().map(|(j, gv)| gv * wd[j / c]).collect(),
                        );
                    }
                }
                Op::Gather { x, indices } => {
                    let mut gx = vec![0.0; nodes[x.0].value.numel()];
                    for (gv, &i) in g.iter().zip(indices) {
                        gx[i] += gv;
                    }
                    acc(&mut grads, *x, gx);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_projection() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::eye(2));
        let m = t.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let out = t.matmul(i, m).unwrap();
        assert_eq!(t.value(out).data(), &[1., 2., 3., 4.]);

        let p = t.constant(Tensor::matrix(2, 2, vec![1., 0., 0., 0.]).unwrap());
        let v = t.constant(Tensor::matrix(2, 1, vec![5., 7.]).unwrap());
        let out = t.matmul(p, v).unwrap();
        assert_eq!(t.value(out).data(), &[5., 0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2×3]") && err.contains("dimension"), "{err}");
    }

    #[test]
    fn softmax_symmetric_and_two_class() {
        let p = softmax(&[3.0; 4], 0.7).unwrap();
        assert!(close(&p, &[0.25; 4], 1e-15));
        let p = softmax(&[1.0, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!(close(&p, &[e / (e + 1.0), 1.0 / (e + 1.0)], 1e-15));
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_rejects_non_positive_temperature() {
        assert!(matches!(softmax(&[1.0], 0.0), Err(CerdError::Parameter(_))));
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(t.softmax(x, -1.0), Err(CerdError::Parameter(_))));
    }

    #[test]
    fn sigmoid_values_and_saturation() {
        assert_eq!(sigmoid(0.0), 0.5);
        let s = sigmoid(-1000.0);
        assert!(s.is_finite() && (0.0..1e-300).contains(&s));
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn reduce_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(2, 2, vec![1., 3., 5., 7.]).unwrap());
        let m = t.mean(x, 0).unwrap();
        assert_eq!(t.value(m).data(), &[3., 5.]);
        let z = t.constant(Tensor::zeros(&[3, 2]));
        let s = t.sum(z, 1).unwrap();
        assert_eq!(t.value(s).data(), &[0., 0., 0.]);
        let row = vec![0.5, -1.25, 3.0];
        let rows = t.constant(Tensor::from_rows(&vec![row.clone(); 16]).unwrap());
        let m = t.mean(rows, 0).unwrap();
        assert_eq!(t.value(m).data(), row.as_slice());
        assert!(matches!(t.mean(rows, 2), Err(CerdError::Dimension(_))));
    }

    #[test]
    fn backward_simple_rules() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1., 2., 3.]).unwrap(), true);
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1., 1., 1.]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1., 2., 3.]).unwrap(), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum_all(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2., 4., 6.]);
        // a second pass accumulates
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[4., 8., 12.]);
        t.zero_grads();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1., 2.]).unwrap(), true);
        assert!(matches!(t.backward(x), Err(CerdError::Contract(_))));
    }

    #[test]
    fn constants_never_accumulate_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::vector(vec![1., 2.]).unwrap());
        let x = t.leaf(Tensor::vector(vec![3., 4.]).unwrap(), true);
        let y = t.mul(c, x).unwrap();
        let s = t.sum_all(y);
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn concat_then_slice_roundtrip() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 3, (0..6).map(f64::from).collect()).unwrap());
        let b = t.constant(Tensor::matrix(2, 1, vec![9., 8.]).unwrap());
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[2, 4]);
        assert_eq!(t.value(c).data(), &[0., 1., 2., 9., 3., 4., 5., 8.]);
        let a2 = t.slice(c, 1, 0, 3).unwrap();
        let b2 = t.slice(c, 1, 3, 1).unwrap();
        assert_eq!(t.value(a2), t.value(a));
        assert_eq!(t.value(b2), t.value(b));
    }

    #[test]
    fn dropout_identity_in_eval_and_inverted_in_training() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1000], 1.0));
        let y = t.dropout(x, 0.5).unwrap();
        assert_eq!(y, x);

        let mut t = Tape::training(7);
        let x = t.constant(Tensor::full(&[1000], 1.0));
        let y = t.dropout(x, 0.5).unwrap();
        let vals = t.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
        assert!(matches!(t.dropout(x, 1.0), Err(CerdError::Parameter(_))));
    }

    #[test]
    fn cross_entropy_limits() {
        let mut t = Tape::new();
        let u = t.constant(Tensor::zeros(&[2, 3]));
        let l = t.cross_entropy(u, &[0, 2]).unwrap();
        assert!((t.value(l).item() - 3f64.ln()).abs() < 1e-15);
        let confident = t.constant(Tensor::matrix(1, 3, vec![0., 60., 0.]).unwrap());
        let l = t.cross_entropy(confident, &[1]).unwrap();
        assert!(t.value(l).item() < 1e-20);
        assert!(matches!(t.cross_entropy(u, &[0, 3]), Err(CerdError::Label(_))));
    }
}
