//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every value produced during a forward pass. Leaves are
//! registered with [`Tape::leaf`] (trainable) or [`Tape::constant`]; each
//! primitive appends one node that references its parents by [`Var`], so the
//! node list is always in topological order. [`Tape::backward`] walks that list
//! once in reverse and returns a [`Gradients`] table.
//!
//! Broadcasting is limited to scalar-by-tensor ops (`div_scalar`, `scale`,
//! `offset`). Everything else requires exact shape agreement.

use std::fmt;

use thiserror::Error;

/// Guard added inside every square root taken by `l2norm` and `cosine_sim`.
pub const NORM_EPS: f64 = 1e-24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported input shape {shape:?} ({expected})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        expected: &'static str,
    },
    #[error("tensor of shape {shape:?} needs {expected} values, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable #{0} is not on this tape")]
    UnknownVar(usize),
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor. The empty shape `[]` is a scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || expected != data.len() {
            return Err(AutodiffError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    /// The single value of a scalar (or length-1) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
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

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    DivScalar(Var, Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    Stack(Vec<Var>),
    SoftmaxRows(Var),
    MeanRows(Var),
    Softmax(Var),
    NegLogProb(Var, usize),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Relu(Var),
    L2Norm(Var),
    CosineSim(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn guarded_norm(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity with the same epsilon guard the tape uses.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (guarded_norm(a) * guarded_norm(b))
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

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(AutodiffError::UnknownVar(v.0))
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.check(v)?;
        if t.shape.len() != 2 {
            return Err(AutodiffError::BadShape {
                op,
                shape: t.shape.clone(),
                expected: "rank-2 matrix",
            });
        }
        Ok((t.shape[0], t.shape[1]))
    }

    fn scalar_input(&self, op: &'static str, v: Var) -> Result<f64> {
        let t = self.check(v)?;
        if !t.is_scalar() {
            return Err(AutodiffError::BadShape {
                op,
                shape: t.shape.clone(),
                expected: "scalar",
            });
        }
        Ok(t.data[0])
    }

    fn vector_len(&self, op: &'static str, v: Var) -> Result<usize> {
        let t = self.check(v)?;
        if t.shape.len() != 1 {
            return Err(AutodiffError::BadShape {
                op,
                shape: t.shape.clone(),
                expected: "rank-1 vector",
            });
        }
        Ok(t.shape[0])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape != tb.shape {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        Ok(())
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let data = matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        let value = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let data = transpose_raw(&self.value(a).data, m, n);
        let value = Tensor {
            shape: vec![n, m],
            data,
        };
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        Ok(Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.check(a)?;
        let v = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|x| x * factor).collect(),
        };
        Ok(self.push(v, Op::Scale(a, factor), &[a]))
    }

    /// Add a constant to every element.
    pub fn offset(&mut self, a: Var, shift: f64) -> Result<Var> {
        let t = self.check(a)?;
        let v = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|x| x + shift).collect(),
        };
        Ok(self.push(v, Op::Offset(a), &[a]))
    }

    /// Divide every element of `a` by the scalar `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_input("div_scalar", s)?;
        let t = self.check(a)?;
        let v = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|x| x / sv).collect(),
        };
        Ok(self.push(v, Op::DivScalar(a, s), &[a, s]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.check(a)?;
        let n: usize = shape.iter().product();
        if n != t.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let v = Tensor {
            shape: shape.to_vec(),
            data: t.data.clone(),
        };
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::BadShape {
                op: "concat",
                shape: vec![],
                expected: "at least one input",
            });
        }
        let (_, cols) = self.matrix_dims("concat", parts[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims("concat", p)?;
            if c != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![rows, cols],
                    rhs: vec![r, c],
                });
            }
            rows += r;
            data.extend_from_slice(&self.value(p).data);
        }
        let v = Tensor {
            shape: vec![rows, cols],
            data,
        };
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Collect scalars into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        if scalars.is_empty() {
            return Err(AutodiffError::BadShape {
                op: "stack",
                shape: vec![],
                expected: "at least one scalar",
            });
        }
        let data = scalars
            .iter()
            .map(|&s| self.scalar_input("stack", s))
            .collect::<Result<Vec<_>>>()?;
        let v = Tensor::vector(data);
        Ok(self.push(v, Op::Stack(scalars.to_vec()), scalars))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("softmax_rows", a)?;
        let mut data = self.value(a).data.clone();
        for i in 0..r {
            softmax_in_place(&mut data[i * c..(i + 1) * c]);
        }
        let v = Tensor {
            shape: vec![r, c],
            data,
        };
        Ok(self.push(v, Op::SoftmaxRows(a), &[a]))
    }

    /// Column means of a matrix: `[r,c] -> [c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("mean_rows", a)?;
        let t = self.value(a);
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, x) in data.iter_mut().zip(t.row(i)) {
                *d += x;
            }
        }
        let inv = 1.0 / r as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        Ok(self.push(Tensor::vector(data), Op::MeanRows(a), &[a]))
    }

    /// Softmax over a vector of logits.
    pub fn softmax_logits(&mut self, logits: Var) -> Result<Var> {
        self.vector_len("softmax_logits", logits)?;
        let mut data = self.value(logits).data.clone();
        softmax_in_place(&mut data);
        Ok(self.push(Tensor::vector(data), Op::Softmax(logits), &[logits]))
    }

    /// `-log softmax(logits)[target]`, computed through log-sum-exp.
    pub fn neg_log_prob(&mut self, logits: Var, target: usize) -> Result<Var> {
        let k = self.vector_len("neg_log_prob", logits)?;
        if target >= k {
            return Err(AutodiffError::IndexOutOfRange {
                op: "neg_log_prob",
                index: target,
                len: k,
            });
        }
        let l = &self.value(logits).data;
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let v = if l[target] == max {
            // ln(1 + Σ_{j≠t} e^(l_j - l_t)) keeps precision when p_t ≈ 1.
            let rest: f64 = (0..k).filter(|&j| j != target).map(|j| (l[j] - max).exp()).sum();
            rest.ln_1p()
        } else {
            max + l.iter().map(|x| (x - max).exp()).sum::<f64>().ln() - l[target]
        };
        let v = Tensor::scalar(v);
        Ok(self.push(v, Op::NegLogProb(logits, target), &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.data.iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.check(a)?;
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), &[a]))
    }

    /// Sum of a list of same-shape variables.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts.split_first().ok_or(AutodiffError::BadShape {
            op: "add_all",
            shape: vec![],
            expected: "at least one input",
        })?;
        let mut acc = first;
        for &p in rest {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let t = self.check(a)?;
        let v = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|x| x.abs()).collect(),
        };
        Ok(self.push(v, Op::Abs(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.check(a)?;
        let v = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|x| x.max(0.0)).collect(),
        };
        Ok(self.push(v, Op::Relu(a), &[a]))
    }

    /// `sqrt(sum(a^2) + NORM_EPS)`
    pub fn l2norm(&mut self, a: Var) -> Result<Var> {
        let n = guarded_norm(&self.check(a)?.data);
        Ok(self.push(Tensor::scalar(n), Op::L2Norm(a), &[a]))
    }

    /// Cosine similarity of two vectors of equal length.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let la = self.vector_len("cosine_sim", a)?;
        let lb = self.vector_len("cosine_sim", b)?;
        if la != lb {
            return Err(AutodiffError::ShapeMismatch {
                op: "cosine_sim",
                lhs: vec![la],
                rhs: vec![lb],
            });
        }
        let c = cosine_similarity(&self.value(a).data, &self.value(b).data);
        Ok(self.push(Tensor::scalar(c), Op::CosineSim(a, b), &[a, b]))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every trainable leaf reachable from `loss` gets its gradient; leaves
    /// that are not reachable report zeros. Calling this twice on the same
    /// tape yields bit-identical tables.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.check(loss)?;
        if !lt.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
            leaf_mask: self
                .nodes
                .iter()
                .map(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
                .collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.requires_grad(*a) {
                    let bt = transpose_raw(&tb.data, k, n);
                    let ga = matmul_raw(g, &bt, m, n, k);
                    self.accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(&ta.data, m, k);
                    let gb = matmul_raw(&at, g, k, m, n);
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape[0], out.shape[1]);
                self.accumulate(grads, *a, &transpose_raw(g, m, n));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga: Vec<f64> = g.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.iter().zip(&ta.data).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, &ga);
                self.accumulate(grads, *b, &gb);
            }
            Op::Scale(a, f) => {
                let ga: Vec<f64> = g.iter().map(|x| x * f).collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::Offset(a) | Op::Reshape(a) => self.accumulate(grads, *a, g),
            Op::DivScalar(a, s) => {
                let sv = self.value(*s).data[0];
                let ta = self.value(*a);
                let ga: Vec<f64> = g.iter().map(|x| x / sv).collect();
                self.accumulate(grads, *a, &ga);
                let gs = -g.iter().zip(&ta.data).map(|(x, y)| x * y).sum::<f64>() / (sv * sv);
                self.accumulate(grads, *s, &[gs]);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).data.len();
                    self.accumulate(grads, *p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::Stack(parts) => {
                for (p, gv) in parts.iter().zip(g) {
                    self.accumulate(grads, *p, &[*gv]);
                }
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = (out.shape[0], out.shape[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out.data[i * c..(i + 1) * c];
                    let gy = &g[i * c..(i + 1) * c];
                    let inner = dot(y, gy);
                    for j in 0..c {
                        ga[i * c + j] = y[j] * (gy[j] - inner);
                    }
                }
                self.accumulate(grads, *a, &ga);
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let (r, c) = (ta.shape[0], ta.shape[1]);
                let inv = 1.0 / r as f64;
                let mut ga = Vec::with_capacity(r * c);
                for _ in 0..r {
                    ga.extend(g.iter().map(|x| x * inv));
                }
                self.accumulate(grads, *a, &ga);
            }
            Op::Softmax(a) => {
                let inner = dot(&out.data, g);
                let ga: Vec<f64> = out
                    .data
                    .iter()
                    .zip(g)
                    .map(|(y, gy)| y * (gy - inner))
                    .collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::NegLogProb(a, target) => {
                let mut p = self.value(*a).data.clone();
                softmax_in_place(&mut p);
                p[*target] = -p.iter().enumerate().filter(|(j, _)| j != target).map(|(_, v)| v).sum::<f64>();
                p.iter_mut().for_each(|v| *v *= g[0]);
                self.accumulate(grads, *a, &p);
            }
            Op::Sum(a) => {
                let n = self.value(*a).data.len();
                self.accumulate(grads, *a, &vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).data.len();
                self.accumulate(grads, *a, &vec![g[0] / n as f64; n]);
            }
            Op::Abs(a) => {
                let ga: Vec<f64> = self
                    .value(*a)
                    .data
                    .iter()
                    .zip(g)
                    .map(|(x, gv)| if *x > 0.0 { *gv } else if *x < 0.0 { -gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::Relu(a) => {
                let ga: Vec<f64> = self
                    .value(*a)
                    .data
                    .iter()
                    .zip(g)
                    .map(|(x, gv)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::L2Norm(a) => {
                let n = out.data[0];
                let ga: Vec<f64> = self.value(*a).data.iter().map(|x| g[0] * x / n).collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::CosineSim(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                let (na, nb) = (guarded_norm(va), guarded_norm(vb));
                let c = out.data[0];
                if self.requires_grad(*a) {
                    let ga: Vec<f64> = va
                        .iter()
                        .zip(vb)
                        .map(|(x, y)| g[0] * (y / (na * nb) - c * x / (na * na)))
                        .collect();
                    self.accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let gb: Vec<f64> = va
                        .iter()
                        .zip(vb)
                        .map(|(x, y)| g[0] * (x / (na * nb) - c * y / (nb * nb)))
                        .collect();
                    self.accumulate(grads, *b, &gb);
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    leaf_mask: Vec<bool>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when nothing
    /// flowed into it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0).and_then(|g| g.clone()).map(|data| Tensor {
            shape: self.shapes[v.0].clone(),
            data,
        })
    }

    /// Gradient of the loss with respect to `v`; zeros when unreachable.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| {
            let shape = self
                .shapes
                .get(v.0)
                .cloned()
                .unwrap_or_else(|| vec![1]);
            Tensor::zeros(&shape)
        })
    }

    /// Trainable leaves that received a gradient (including exact zeros).
    pub fn reached_leaves(&self) -> impl Iterator<Item = Var> + '_ {
        self.leaf_mask
            .iter()
            .enumerate()
            .filter(move |(i, is_leaf)| **is_leaf && self.grads.get(*i).is_some_and(|g| g.is_some()))
            .map(|(i, _)| Var(i))
    }
}

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Central differences of a plain scalar function.
pub fn numeric_gradient<F>(mut f: F, at: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(AutodiffError::BadStep(h));
    }
    let mut x = at.to_vec();
    let mut out = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x)?;
        x[i] = orig - h;
        let fm = f(&x)?;
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(AutodiffError::NonFinite(format!(
                "f({}±h) = ({fp}, {fm})",
                i
            )));
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// `|a - n| / max(1, |n|)` maximised over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(i, (a, n))| ((a - n).abs() / n.abs().max(1.0), i))
        .fold((0.0, 0), |best, cur| if cur.0 > best.0 { cur } else { best })
}

/// Compare the tape gradient of `f` at `at` with central differences.
///
/// `f` receives a fresh tape and the input variable and must return a scalar
/// node on that tape.
pub fn finite_difference_check<F>(f: F, at: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(AutodiffError::BadStep(h));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(at.clone());
    let y = f(&mut tape, x)?;
    if !tape.value(y).is_finite() {
        return Err(AutodiffError::NonFinite(format!("f(x) = {:?}", tape.value(y))));
    }
    let analytic = tape.backward(y)?.wrt(x).into_data();

    let shape = at.shape().to_vec();
    let numeric = numeric_gradient(
        |xs| {
            let mut t = Tape::new();
            let v = t.constant(Tensor::new(shape.clone(), xs.to_vec())?);
            let out = f(&mut t, v)?;
            Ok(t.value(out).item())
        },
        at.data(),
        h,
    )?;
    let (max_rel_error, worst_index) = max_relative_error(&analytic, &numeric);
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn rand_tensor(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), rng.normal_vec(n, 1.0)).unwrap()
    }

    #[test]
    fn cosine_of_orthogonal_and_identical() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 0.0]));
        let b = t.constant(Tensor::vector(vec![0.0, 1.0]));
        let c = t.cosine_sim(a, b).unwrap();
        assert_eq!(t.value(c).item(), 0.0);
        let v = t.constant(Tensor::vector(vec![0.3, -2.0, 5.0]));
        let c = t.cosine_sim(v, v).unwrap();
        assert!((t.value(c).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SplitMix64::new(11);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let mut expected = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    expected[i * 2 + j] += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
            }
        }
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a), t.constant(b));
        let c = t.matmul(va, vb).unwrap();
        assert_eq!(t.value(c).shape(), &[3, 2]);
        for (x, y) in t.value(c).data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
        let v = t.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.add(a, v), Err(AutodiffError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn tensor_length_invariant() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let s = t.sum(v).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(v).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut t = Tape::new();
        let u = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let v = t.leaf(Tensor::vector(vec![3.0, 4.0]));
        let s = t.sum(v).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(u).is_none());
        assert_eq!(g.wrt(u).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(v), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn constant_inputs_do_not_require_grad() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.sum(a).unwrap();
        assert!(!t.requires_grad(b));
        let l = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = t.add(a, l).unwrap();
        assert!(t.requires_grad(c));
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let c = Tensor::vector(vec![0.4, -1.0, 2.0, 0.1]);
        let at = Tensor::vector(vec![1.0, 0.5, -0.3, 2.0]);
        let check = finite_difference_check(
            |t, x| {
                let cv = t.constant(c.clone());
                t.cosine_sim(x, cv)
            },
            &at,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error <= 1e-6, "{check:?}");
    }

    #[test]
    fn squared_norm_check_is_tight() {
        let at = Tensor::vector(vec![1.0, 2.0]);
        let check = finite_difference_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &at,
            1e-5,
        )
        .unwrap();
        assert_eq!(check.analytic, vec![2.0, 4.0]);
        assert!(check.max_rel_error <= 1e-8, "{check:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let at = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let check = finite_difference_check(
            |t, _x| Ok(t.constant(Tensor::scalar(4.2))),
            &at,
            1e-5,
        )
        .unwrap();
        assert_eq!(check.max_rel_error, 0.0);
        assert!(check.analytic.iter().chain(&check.numeric).all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_outputs_are_reported() {
        let at = Tensor::vector(vec![1.0]);
        let err = finite_difference_check(
            |t, x| {
                let z = t.scale(x, f64::INFINITY)?;
                t.sum(z)
            },
            &at,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, AutodiffError::NonFinite(_)));
        assert!(matches!(
            finite_difference_check(|t, x| t.sum(x), &at, 0.0),
            Err(AutodiffError::BadStep(_))
        ));
    }

    #[test]
    fn replayed_backward_is_bit_identical() {
        let mut rng = SplitMix64::new(5);
        let mut t = Tape::new();
        let a = t.leaf(rand_tensor(&mut rng, &[3, 3]));
        let b = t.constant(rand_tensor(&mut rng, &[3, 3]));
        let m = t.matmul(a, b).unwrap();
        let s = t.softmax_rows(m).unwrap();
        let y = t.mean_rows(s).unwrap();
        let n = t.l2norm(y).unwrap();
        let g1 = t.backward(n).unwrap().wrt(a);
        let g2 = t.backward(n).unwrap().wrt(a);
        assert_eq!(
            g1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
