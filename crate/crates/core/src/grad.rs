//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation eagerly: values are computed when the
//! op is pushed, and [`Tape::backward`] walks the records in reverse to
//! accumulate gradients. Nodes that do not depend on any leaf are skipped
//! during the backward pass.
//!
//! Elementwise binary ops broadcast only over trailing dimensions: the shape
//! of one operand must be a suffix of the other's (a scalar `[]` is a suffix
//! of every shape).
//!
//! Subgradient conventions: `relu'(0) = 0`, `sqrt'(0) = 0`, `abs'(0) = 0`,
//! and min/max reductions route the gradient to the first extremal index.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op}: index {index} out of range for axis of length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
}

pub type Result<T> = std::result::Result<T, GradError>;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(GradError::BadShape {
                op: "tensor",
                reason: format!("expected {} elements, got {}", numel(&shape), data.len()),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Reduce {
    Sum,
    Mean,
    Max,
    Min,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Atan2(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    Abs(Var),
    Tanh(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Reduce(Var, Reduce),
    ReduceAxis {
        input: Var,
        axis: usize,
        kind: Reduce,
        arg: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    Gather {
        input: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var`, or `None` when the root does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `var`, zero-filled when there is no dependency.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Split `shape` around `axis` into (outer, axis_len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if is_suffix(b, a) {
        Ok(a.to_vec())
    } else if is_suffix(a, b) {
        Ok(b.to_vec())
    } else {
        Err(GradError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// Batched matmul geometry: (batch_a, batch_b, m, k, n, out_shape).
fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, usize, Vec<usize>)> {
    let err = || GradError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 || a.len() > 3 || b.len() > 3 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let ba = if a.len() == 3 { a[0] } else { 1 };
    let bb = if b.len() == 3 { b[0] } else { 1 };
    if a.len() == 3 && b.len() == 3 && ba != bb {
        return Err(err());
    }
    if a.len() == 2 && b.len() == 3 {
        return Err(err());
    }
    let mut out = Vec::new();
    if a.len() == 3 {
        out.push(ba);
    }
    out.push(m);
    out.push(n);
    Ok((ba, bb, m, k, n, out))
}

/// out[m,n] += a[m,k] * b[k,n]
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] * b[k,n]^T
fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

const LAYERNORM_EPS: f64 = 1e-5;

/// Operation recorder. Single owner during construction and backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(name, &va.shape, &vb.shape)?;
        let n = numel(&shape);
        let (na, nb) = (va.data.len(), vb.data.len());
        let data = (0..n).map(|i| f(va.data[i % na], vb.data[i % nb])).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, op, needs))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, |x, y| if y < x { y } else { x }, Op::Minimum(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, |x, y| if y > x { y } else { x }, Op::Maximum(a, b))
    }

    /// Elementwise `atan2(y, x)`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        self.binary("atan2", y, x, f64::atan2, Op::Atan2(y, x))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::Offset(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Matrix product over the last two dims. Supports `[m,k]x[k,n]`,
    /// `[b,m,k]x[b,k,n]` and `[b,m,k]x[k,n]` (shared right operand).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (batch, bb, m, k, n, shape) = matmul_dims(&va.shape, &vb.shape)?;
        let mut data = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let bj = if bb == 1 { 0 } else { bi };
            gemm_acc(
                &va.data[bi * m * k..(bi + 1) * m * k],
                &vb.data[bj * k * n..(bj + 1) * k * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, Op::MatMul(a, b), needs))
    }

    /// Swap the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let r = v.shape.len();
        if r < 2 {
            return Err(GradError::BadShape {
                op: "transpose",
                shape: v.shape.clone(),
                reason: "needs at least two dims".into(),
            });
        }
        let (m, n) = (v.shape[r - 2], v.shape[r - 1]);
        let batch = numel(&v.shape[..r - 2]);
        let mut data = vec![0.0; v.data.len()];
        for b in 0..batch {
            let off = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    data[off + j * m + i] = v.data[off + i * n + j];
                }
            }
        }
        let mut shape = v.shape.clone();
        shape.swap(r - 2, r - 1);
        let needs = self.needs(a);
        Ok(self.push(Tensor { shape, data }, Op::Transpose(a), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if numel(shape) != v.data.len() {
            return Err(GradError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: v.data.clone(),
        };
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    fn reduce_all(&mut self, a: Var, kind: Reduce) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.data.is_empty() {
            return Err(GradError::BadShape {
                op: "reduce",
                shape: v.shape.clone(),
                reason: "empty tensor".into(),
            });
        }
        let out = match kind {
            Reduce::Sum => v.data.iter().sum(),
            Reduce::Mean => v.data.iter().sum::<f64>() / v.data.len() as f64,
            Reduce::Max => v.data[first_extremum(&v.data, |x, best| x > best)],
            Reduce::Min => v.data[first_extremum(&v.data, |x, best| x < best)],
        };
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(out), Op::Reduce(a, kind), needs))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce_all(a, Reduce::Sum)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce_all(a, Reduce::Mean)
    }

    pub fn max(&mut self, a: Var) -> Result<Var> {
        self.reduce_all(a, Reduce::Max)
    }

    pub fn min(&mut self, a: Var) -> Result<Var> {
        self.reduce_all(a, Reduce::Min)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, kind: Reduce) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if axis >= v.shape.len() || v.shape[axis] == 0 {
            return Err(GradError::BadShape {
                op: "reduce_axis",
                shape: v.shape.clone(),
                reason: format!("cannot reduce axis {axis}"),
            });
        }
        let (outer, len, inner) = split_axis(&v.shape, axis);
        let mut data = vec![0.0; outer * inner];
        let mut arg = Vec::new();
        if matches!(kind, Reduce::Max | Reduce::Min) {
            arg = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| v.data[(o * len + j) * inner + i];
                let slot = o * inner + i;
                match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let mut s = 0.0;
                        for j in 0..len {
                            s += at(j);
                        }
                        data[slot] = if kind == Reduce::Mean { s / len as f64 } else { s };
                    }
                    Reduce::Max | Reduce::Min => {
                        let mut best = 0;
                        for j in 1..len {
                            let better = if kind == Reduce::Max {
                                at(j) > at(best)
                            } else {
                                at(j) < at(best)
                            };
                            if better {
                                best = j;
                            }
                        }
                        arg[slot] = best;
                        data[slot] = at(best);
                    }
                }
            }
        }
        let mut shape = v.shape.clone();
        shape.remove(axis);
        let needs = self.needs(a);
        Ok(self.push(
            Tensor { shape, data },
            Op::ReduceAxis {
                input: a,
                axis,
                kind,
                arg,
            },
            needs,
        ))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, Reduce::Sum)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, Reduce::Mean)
    }

    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, Reduce::Max)
    }

    pub fn min_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, Reduce::Min)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let n = *v.shape.last().ok_or_else(|| GradError::BadShape {
            op: "softmax",
            shape: vec![],
            reason: "scalar input".into(),
        })?;
        let mut data = v.data.clone();
        for row in data.chunks_mut(n.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let value = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let needs = self.needs(a);
        Ok(self.push(value, Op::Softmax(a), needs))
    }

    /// Normalization over the last dimension to zero mean and unit variance.
    pub fn layernorm(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let n = match v.shape.last() {
            Some(&n) if n > 0 => n,
            _ => {
                return Err(GradError::BadShape {
                    op: "layernorm",
                    shape: v.shape.clone(),
                    reason: "needs a non-empty last dim".into(),
                })
            }
        };
        let mut data = v.data.clone();
        let mut inv_std = Vec::with_capacity(data.len() / n);
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let needs = self.needs(a);
        Ok(self.push(value, Op::LayerNorm { input: a, inv_std }, needs))
    }

    /// Select `indices` along `axis`; repeated indices are allowed.
    pub fn gather(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if axis >= v.shape.len() {
            return Err(GradError::BadShape {
                op: "gather",
                shape: v.shape.clone(),
                reason: format!("no axis {axis}"),
            });
        }
        let (outer, len, inner) = split_axis(&v.shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(GradError::IndexOutOfRange {
                op: "gather",
                index: bad,
                len,
            });
        }
        let k = indices.len();
        let mut data = Vec::with_capacity(outer * k * inner);
        for o in 0..outer {
            for &j in indices {
                let start = (o * len + j) * inner;
                data.extend_from_slice(&v.data[start..start + inner]);
            }
        }
        let mut shape = v.shape.clone();
        shape[axis] = k;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor { shape, data },
            Op::Gather {
                input: a,
                axis,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| GradError::BadShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let base = self.nodes[first.0].value.shape.clone();
        if axis >= base.len() {
            return Err(GradError::BadShape {
                op: "concat",
                shape: base,
                reason: format!("no axis {axis}"),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = &self.nodes[v.0].value.shape;
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(GradError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Reverse-mode gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.data.len() != 1 {
            return Err(GradError::NonScalarRoot(rv.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(&rv.shape, 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.acc_broadcast(grads, *a, g, |_, _, gi| gi, *b, |_, _, gi| gi);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(grads, *a, g, |_, _, gi| gi, *b, |_, _, gi| -gi);
            }
            Op::Mul(a, b) => {
                self.acc_broadcast(grads, *a, g, |_, y, gi| gi * y, *b, |x, _, gi| gi * x);
            }
            Op::Div(a, b) => {
                self.acc_broadcast(
                    grads,
                    *a,
                    g,
                    |_, y, gi| gi / y,
                    *b,
                    |x, y, gi| -gi * x / (y * y),
                );
            }
            Op::Minimum(a, b) => {
                self.acc_broadcast(
                    grads,
                    *a,
                    g,
                    |x, y, gi| if y < x { 0.0 } else { gi },
                    *b,
                    |x, y, gi| if y < x { gi } else { 0.0 },
                );
            }
            Op::Maximum(a, b) => {
                self.acc_broadcast(
                    grads,
                    *a,
                    g,
                    |x, y, gi| if y > x { 0.0 } else { gi },
                    *b,
                    |x, y, gi| if y > x { gi } else { 0.0 },
                );
            }
            Op::Atan2(a, b) => {
                // d/dy atan2(y,x) = x/(x²+y²); d/dx = -y/(x²+y²)
                self.acc_broadcast(
                    grads,
                    *a,
                    g,
                    |y, x, gi| {
                        let r = x * x + y * y;
                        if r == 0.0 {
                            0.0
                        } else {
                            gi * x / r
                        }
                    },
                    *b,
                    |y, x, gi| {
                        let r = x * x + y * y;
                        if r == 0.0 {
                            0.0
                        } else {
                            -gi * y / r
                        }
                    },
                );
            }
            Op::Neg(a) => self.acc_unary(grads, *a, g, |_, _, gi| -gi),
            Op::Scale(a, k) => {
                let k = *k;
                self.acc_unary(grads, *a, g, |_, _, gi| gi * k)
            }
            Op::Offset(a) | Op::Reshape(a) => self.acc_unary(grads, *a, g, |_, _, gi| gi),
            Op::Relu(a) => self.acc_unary(grads, *a, g, |x, _, gi| if x > 0.0 { gi } else { 0.0 }),
            Op::Sin(a) => self.acc_unary(grads, *a, g, |x, _, gi| gi * x.cos()),
            Op::Cos(a) => self.acc_unary(grads, *a, g, |x, _, gi| -gi * x.sin()),
            Op::Exp(a) => self.acc_unary_out(grads, *a, g, out, |_, y, gi| gi * y),
            Op::Sqrt(a) => self.acc_unary_out(grads, *a, g, out, |_, y, gi| {
                if y > 0.0 {
                    gi * 0.5 / y
                } else {
                    0.0
                }
            }),
            Op::Square(a) => self.acc_unary(grads, *a, g, |x, _, gi| 2.0 * x * gi),
            Op::Abs(a) => self.acc_unary(grads, *a, g, |x, _, gi| {
                if x > 0.0 {
                    gi
                } else if x < 0.0 {
                    -gi
                } else {
                    0.0
                }
            }),
            Op::Tanh(a) => self.acc_unary_out(grads, *a, g, out, |_, y, gi| gi * (1.0 - y * y)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.acc_unary(grads, *a, g, |x, _, gi| if x >= lo && x <= hi { gi } else { 0.0 })
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (batch, bb, m, k, n, _) =
                    matmul_dims(&va.shape, &vb.shape).expect("validated at forward");
                if self.needs(*a) {
                    let ga = slot(grads, *a, &va.shape);
                    for bi in 0..batch {
                        let bj = if bb == 1 { 0 } else { bi };
                        gemm_nt_acc(
                            &g.data[bi * m * n..(bi + 1) * m * n],
                            &vb.data[bj * k * n..(bj + 1) * k * n],
                            &mut ga.data[bi * m * k..(bi + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, &vb.shape);
                    for bi in 0..batch {
                        let bj = if bb == 1 { 0 } else { bi };
                        gemm_tn_acc(
                            &va.data[bi * m * k..(bi + 1) * m * k],
                            &g.data[bi * m * n..(bi + 1) * m * n],
                            &mut gb.data[bj * k * n..(bj + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let va = val(*a);
                    let r = va.shape.len();
                    let (m, n) = (va.shape[r - 2], va.shape[r - 1]);
                    let batch = numel(&va.shape[..r - 2]);
                    let ga = slot(grads, *a, &va.shape);
                    for b in 0..batch {
                        let off = b * m * n;
                        for i in 0..m {
                            for j in 0..n {
                                ga.data[off + i * n + j] += g.data[off + j * m + i];
                            }
                        }
                    }
                }
            }
            Op::Reduce(a, kind) => {
                if self.needs(*a) {
                    let va = val(*a);
                    let gi = g.data[0];
                    let ga = slot(grads, *a, &va.shape);
                    match kind {
                        Reduce::Sum => ga.data.iter_mut().for_each(|x| *x += gi),
                        Reduce::Mean => {
                            let n = va.data.len() as f64;
                            ga.data.iter_mut().for_each(|x| *x += gi / n)
                        }
                        Reduce::Max => {
                            ga.data[first_extremum(&va.data, |x, best| x > best)] += gi
                        }
                        Reduce::Min => {
                            ga.data[first_extremum(&va.data, |x, best| x < best)] += gi
                        }
                    }
                }
            }
            Op::ReduceAxis {
                input,
                axis,
                kind,
                arg,
            } => {
                if self.needs(*input) {
                    let va = val(*input);
                    let (outer, len, inner) = split_axis(&va.shape, *axis);
                    let ga = slot(grads, *input, &va.shape);
                    for o in 0..outer {
                        for i in 0..inner {
                            let slot_i = o * inner + i;
                            let gi = g.data[slot_i];
                            match kind {
                                Reduce::Sum | Reduce::Mean => {
                                    let w = if *kind == Reduce::Mean {
                                        gi / len as f64
                                    } else {
                                        gi
                                    };
                                    for j in 0..len {
                                        ga.data[(o * len + j) * inner + i] += w;
                                    }
                                }
                                Reduce::Max | Reduce::Min => {
                                    ga.data[(o * len + arg[slot_i]) * inner + i] += gi;
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let n = *out.shape.last().unwrap_or(&1);
                    let ga = slot(grads, *a, &out.shape);
                    for ((y, gr), dst) in out
                        .data
                        .chunks(n)
                        .zip(g.data.chunks(n))
                        .zip(ga.data.chunks_mut(n))
                    {
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dst[j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { input, inv_std } => {
                if self.needs(*input) {
                    let n = *out.shape.last().unwrap_or(&1);
                    let nf = n as f64;
                    let ga = slot(grads, *input, &out.shape);
                    for (r, ((y, gr), dst)) in out
                        .data
                        .chunks(n)
                        .zip(g.data.chunks(n))
                        .zip(ga.data.chunks_mut(n))
                        .enumerate()
                    {
                        let mg = gr.iter().sum::<f64>() / nf;
                        let mgy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for j in 0..n {
                            dst[j] += inv_std[r] * (gr[j] - mg - y[j] * mgy);
                        }
                    }
                }
            }
            Op::Gather {
                input,
                axis,
                indices,
            } => {
                if self.needs(*input) {
                    let va = val(*input);
                    let (outer, len, inner) = split_axis(&va.shape, *axis);
                    let k = indices.len();
                    let ga = slot(grads, *input, &va.shape);
                    for o in 0..outer {
                        for (p, &j) in indices.iter().enumerate() {
                            let src = (o * k + p) * inner;
                            let dst = (o * len + j) * inner;
                            for t in 0..inner {
                                ga.data[dst + t] += g.data[src + t];
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let total = out.shape[*axis];
                let outer = numel(&out.shape[..*axis]);
                let inner = numel(&out.shape[*axis + 1..]);
                let mut offset = 0;
                for v in inputs {
                    let vs = val(*v).shape.clone();
                    let width = vs[*axis];
                    if self.needs(*v) {
                        let gv = slot(grads, *v, &vs);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * width * inner;
                            for t in 0..width * inner {
                                gv.data[dst + t] += g.data[src + t];
                            }
                        }
                    }
                    offset += width;
                }
            }
        }
    }

    fn acc_unary(
        &self,
        grads: &mut [Option<Tensor>],
        a: Var,
        g: &Tensor,
        f: impl Fn(f64, f64, f64) -> f64,
    ) {
        if !self.needs(a) {
            return;
        }
        let va = &self.nodes[a.0].value;
        let ga = slot(grads, a, &va.shape);
        for i in 0..va.data.len() {
            ga.data[i] += f(va.data[i], 0.0, g.data[i]);
        }
    }

    fn acc_unary_out(
        &self,
        grads: &mut [Option<Tensor>],
        a: Var,
        g: &Tensor,
        out: &Tensor,
        f: impl Fn(f64, f64, f64) -> f64,
    ) {
        if !self.needs(a) {
            return;
        }
        let va = &self.nodes[a.0].value;
        let ga = slot(grads, a, &va.shape);
        for i in 0..va.data.len() {
            ga.data[i] += f(va.data[i], out.data[i], g.data[i]);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn acc_broadcast(
        &self,
        grads: &mut [Option<Tensor>],
        a: Var,
        g: &Tensor,
        fa: impl Fn(f64, f64, f64) -> f64,
        b: Var,
        fb: impl Fn(f64, f64, f64) -> f64,
    ) {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (na, nb) = (va.data.len(), vb.data.len());
        let n = g.data.len();
        if self.needs(a) {
            let mut acc = vec![0.0; na];
            for i in 0..n {
                acc[i % na] += fa(va.data[i % na], vb.data[i % nb], g.data[i]);
            }
            let ga = slot(grads, a, &va.shape);
            ga.data.iter_mut().zip(acc).for_each(|(x, d)| *x += d);
        }
        if self.needs(b) {
            let mut acc = vec![0.0; nb];
            for i in 0..n {
                acc[i % nb] += fb(va.data[i % na], vb.data[i % nb], g.data[i]);
            }
            let gb = slot(grads, b, &vb.shape);
            gb.data.iter_mut().zip(acc).for_each(|(x, d)| *x += d);
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn first_extremum(data: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for (i, &x) in data.iter().enumerate().skip(1) {
        if better(x, data[best]) {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values_and_mask_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = t.sum(r).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn square_derivative_at_three() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn matmul_hand_value() {
        // [[1,2,3],[4,5,6]] x [[1,0],[0,1],[0,0]] = [[1,2],[4,5]]
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = t.constant(Tensor::matrix(3, 2, vec![1., 0., 0., 1., 0., 0.]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 2]);
        assert_eq!(t.value(c).data(), &[1., 2., 4., 5.]);
    }

    #[test]
    fn softmax_of_uniform_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[4], 0.7));
        let s = t.softmax(x).unwrap();
        for &v in t.value(s).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2]));
        let err = t.add(a, b).unwrap_err();
        assert_eq!(
            err,
            GradError::ShapeMismatch {
                op: "add",
                lhs: vec![2, 3],
                rhs: vec![2]
            }
        );
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[2]"));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[3]));
        assert!(matches!(t.backward(a), Err(GradError::NonScalarRoot(_))));
    }

    #[test]
    fn trailing_broadcast_accumulates_over_rows() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let b = t.leaf(Tensor::vector(vec![10., 20.]));
        let c = t.mul(a, b).unwrap();
        let s = t.sum(c).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[4., 6.]);
        assert_eq!(g.get(a).unwrap().data(), &[10., 20., 10., 20.]);
    }

    #[test]
    fn max_routes_to_first_argmax() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1., 5., 5., 2.]));
        let m = t.max(a).unwrap();
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0., 1., 0., 0.]);
    }

    #[test]
    fn gather_and_concat_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let g = t.gather(a, 0, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(g).data(), &[5., 6., 1., 2., 5., 6.]);
        let col = t.gather(a, 1, &[1]).unwrap();
        assert_eq!(t.value(col).data(), &[2., 4., 6.]);
        let c = t.concat(&[a, g], 0).unwrap();
        assert_eq!(t.shape(c), &[6, 2]);
        assert!(t.gather(a, 0, &[3]).is_err());
    }
}
