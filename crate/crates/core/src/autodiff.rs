//! Minimal reverse-mode automatic differentiation over dense row-major
//! tensors.
//!
//! A [`Tape`] records every operation eagerly: each call computes the forward
//! value immediately and appends a node. [`Tape::backward`] walks the nodes in
//! reverse creation order, which is a topological order of the DAG, and visits
//! each node once. Operations work on 2-D views: a rank-1 tensor of length `n`
//! is treated as `1 × n` and a scalar as `1 × 1`.
//!
//! Only leaves created with [`Tape::param`] (and nodes depending on them)
//! receive gradients, so constants such as one-hot matrices and temporal
//! encodings cost nothing in the backward pass.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{normal_cdf, normal_hazard_ratio, normal_pdf, log_normal_cdf};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("log of non-positive value {0}")]
    LogNonPositive(f64),
    #[error("non-finite gradient at parameter {param}, index {index}")]
    NonFiniteGradient { param: usize, index: usize },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}

type AdResult<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> AdResult<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AutodiffError::Invalid(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> AdResult<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn column(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len(), 1],
            data,
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

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.shape[self.shape.len() - 1],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn dims(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    fn same_dims(&self, other: &Tensor, op: &'static str) -> AdResult<()> {
        if self.dims() != other.dims() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: vec![self.rows(), self.cols()],
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: vec![self.rows(), self.cols()],
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> AdResult<Tensor> {
        let (n, k) = self.dims();
        let (m, k2) = other.dims();
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> AdResult<Tensor> {
        let (n, k) = self.dims();
        let (k2, m) = other.dims();
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sin(Var),
    Cos(Var),
    SoftmaxRows(Var),
    CausalSoftmax(Var),
    Sum(Var),
    Mean(Var),
    LogSumExpRows(Var),
    NormalCdf(Var),
    LogNormalCdf(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    Clamp(Var, f64, f64),
    Pick(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Arc<Tensor>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Arc<Tensor>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(Arc::new(t), true)
    }

    pub fn param_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.leaf(t, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Arc::new(t), false)
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.leaf(t, false)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> AdResult<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_dims(y, name)?;
        Ok(x.zip(y, f))
    }

    pub fn add(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(Op::Div(a, b), v, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.push(Op::Scale(a, c), v, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), v, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v, &[a, b]))
    }

    /// `a · bᵀ`, the layout used for weights stored as `out × in`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Op::MatMulNT(a, b), v, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v, &[a])
    }

    /// Concatenates along columns; all inputs must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> AdResult<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape.clone(),
                    right: t.shape.clone(),
                });
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let v = Tensor {
            shape: vec![rows, cols],
            data,
        };
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v, parts))
    }

    /// Concatenates along rows; all inputs must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> AdResult<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape.clone(),
                    right: t.shape.clone(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        let v = Tensor {
            shape: vec![rows, cols],
            data,
        };
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v, parts))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> AdResult<Var> {
        let t = self.value(a);
        let (r, c) = t.dims();
        if start > end || end > c {
            return Err(AutodiffError::Invalid(format!("column slice {start}..{end} of {c}")));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&t.data[i * c + start..i * c + end]);
        }
        let v = Tensor {
            shape: vec![r, end - start],
            data,
        };
        Ok(self.push(Op::SliceCols(a, start), v, &[a]))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> AdResult<Var> {
        let t = self.value(a);
        let (r, c) = t.dims();
        if start > end || end > r {
            return Err(AutodiffError::Invalid(format!("row slice {start}..{end} of {r}")));
        }
        let v = Tensor {
            shape: vec![end - start, c],
            data: t.data[start * c..end * c].to_vec(),
        };
        Ok(self.push(Op::SliceRows(a, start), v, &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v, &[a])
    }

    pub fn log(&mut self, a: Var) -> AdResult<Var> {
        let t = self.value(a);
        if let Some(&bad) = t.data.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(AutodiffError::LogNonPositive(bad));
        }
        let v = t.map(f64::ln);
        Ok(self.push(Op::Log(a), v, &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v, &[a])
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sin);
        self.push(Op::Sin(a), v, &[a])
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::cos);
        self.push(Op::Cos(a), v, &[a])
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row_slice(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                data[i * c + j] = e;
                s += e;
            }
            for x in &mut data[i * c..(i + 1) * c] {
                *x /= s;
            }
        }
        let v = Tensor {
            shape: vec![r, c],
            data,
        };
        self.push(Op::SoftmaxRows(a), v, &[a])
    }

    /// Row `i` of a square score matrix is normalised over columns `0..=i`;
    /// later columns are exactly zero. With `sink`, the normaliser gains an
    /// extra `exp(0)` term, so each row sums to less than one.
    pub fn causal_softmax(&mut self, a: Var, sink: bool) -> AdResult<Var> {
        let t = self.value(a);
        let (r, c) = t.dims();
        if r != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "causal_softmax",
                left: t.shape.clone(),
                right: vec![r, r],
            });
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.row_slice(i)[..=i];
            let mut m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if sink {
                m = m.max(0.0);
            }
            let mut s = if sink { (-m).exp() } else { 0.0 };
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                data[i * c + j] = e;
                s += e;
            }
            for x in &mut data[i * c..i * c + i + 1] {
                *x /= s;
            }
        }
        let v = Tensor {
            shape: vec![r, c],
            data,
        };
        Ok(self.push(Op::CausalSoftmax(a), v, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s), &[a])
    }

    /// Row-wise log-sum-exp, `n × m → n × 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let r = t.rows();
        let data = (0..r).map(|i| crate::numeric::log_sum_exp(t.row_slice(i))).collect();
        self.push(Op::LogSumExpRows(a), Tensor::column(data), &[a])
    }

    /// Standard normal CDF `Φ`.
    pub fn normal_cdf(&mut self, a: Var) -> Var {
        let v = self.value(a).map(normal_cdf);
        self.push(Op::NormalCdf(a), v, &[a])
    }

    /// `ln Φ`, stable far into the left tail.
    pub fn log_normal_cdf(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_normal_cdf);
        self.push(Op::LogNormalCdf(a), v, &[a])
    }

    /// Repeats a `1 × m` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> AdResult<Var> {
        let t = self.value(a);
        if t.rows() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_rows",
                left: t.shape.clone(),
                right: vec![1, t.cols()],
            });
        }
        let mut data = Vec::with_capacity(n * t.cols());
        for _ in 0..n {
            data.extend_from_slice(&t.data);
        }
        let v = Tensor {
            shape: vec![n, t.cols()],
            data,
        };
        Ok(self.push(Op::BroadcastRows(a), v, &[a]))
    }

    /// Repeats an `n × 1` column `m` times.
    pub fn broadcast_cols(&mut self, a: Var, m: usize) -> AdResult<Var> {
        let t = self.value(a);
        if t.cols() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_cols",
                left: t.shape.clone(),
                right: vec![t.rows(), 1],
            });
        }
        let data = t.data.iter().flat_map(|&x| std::iter::repeat_n(x, m)).collect();
        let v = Tensor {
            shape: vec![t.rows(), m],
            data,
        };
        Ok(self.push(Op::BroadcastCols(a), v, &[a]))
    }

    /// Adds a `1 × m` bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> AdResult<Var> {
        let n = self.value(a).rows();
        let b = self.broadcast_rows(bias, n)?;
        self.add(a, b)
    }

    /// `a · wᵀ + bias` for a weight stored as `out × in`.
    pub fn affine(&mut self, a: Var, w: Var, bias: Var) -> AdResult<Var> {
        let y = self.matmul_nt(a, w)?;
        self.add_row(y, bias)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v, &[a])
    }

    /// Element `idx[i]` of every row `i`, `n × m → n × 1`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> AdResult<Var> {
        let t = self.value(a);
        let (r, c) = t.dims();
        if idx.len() != r || idx.iter().any(|&k| k >= c) {
            return Err(AutodiffError::Invalid(format!(
                "pick of {} indices from {r}x{c}",
                idx.len()
            )));
        }
        let data = idx.iter().enumerate().map(|(i, &k)| t.data[i * c + k]).collect();
        Ok(self.push(Op::Pick(a, idx.to_vec()), Tensor::column(data), &[a]))
    }

    /// Row-wise log-softmax built from the primitives above.
    pub fn log_softmax_rows(&mut self, a: Var) -> AdResult<Var> {
        let m = self.value(a).cols();
        let lse = self.logsumexp_rows(a);
        let b = self.broadcast_cols(lse, m)?;
        self.sub(a, b)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> AdResult<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(AutodiffError::NotScalar(out.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::filled(out.shape.clone(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip(vb, |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip(va, |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip(vb, |x, y| x / y));
                }
                if self.wants(*b) {
                    let mut gb = g.zip(va, |x, y| -x * y);
                    for (d, &y) in gb.data.iter_mut().zip(&vb.data) {
                        *d /= y * y;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| c * x)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let ga = g.matmul(&vb.transpose()).expect("matmul grad shapes");
                    self.accumulate(grads, *a, reshape_like(ga, va));
                }
                if self.wants(*b) {
                    let gb = va.transpose().matmul(g).expect("matmul grad shapes");
                    self.accumulate(grads, *b, reshape_like(gb, vb));
                }
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let ga = g.matmul(vb).expect("matmul grad shapes");
                    self.accumulate(grads, *a, reshape_like(ga, va));
                }
                if self.wants(*b) {
                    let gb = g.transpose().matmul(va).expect("matmul grad shapes");
                    self.accumulate(grads, *b, reshape_like(gb, vb));
                }
            }
            Op::Transpose(a) => {
                let ga = g.transpose();
                self.accumulate(grads, *a, reshape_like(ga, self.value(*a)));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            data.extend_from_slice(&g.data[r * total + offset..r * total + offset + pc]);
                        }
                        let t = Tensor {
                            shape: vec![rows, pc],
                            data,
                        };
                        self.accumulate(grads, p, reshape_like(t, self.value(p)));
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.wants(p) {
                        let t = Tensor {
                            shape: vec![pr, cols],
                            data: g.data[offset * cols..(offset + pr) * cols].to_vec(),
                        };
                        self.accumulate(grads, p, reshape_like(t, self.value(p)));
                    }
                    offset += pr;
                }
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let (r, c) = va.dims();
                let w = g.cols();
                let mut ga = Tensor::zeros(va.shape.clone());
                for i in 0..r {
                    ga.data[i * c + start..i * c + start + w].copy_from_slice(g.row_slice(i));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let c = va.cols();
                let mut ga = Tensor::zeros(va.shape.clone());
                ga.data[start * c..start * c + g.len()].copy_from_slice(&g.data);
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip(out, |x, y| x * y)),
            Op::Log(a) => self.accumulate(grads, *a, g.zip(self.value(*a), |x, y| x / y)),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip(out, |x, y| x * (1.0 - y * y))),
            Op::Sin(a) => self.accumulate(grads, *a, g.zip(self.value(*a), |x, y| x * y.cos())),
            Op::Cos(a) => self.accumulate(grads, *a, g.zip(self.value(*a), |x, y| -x * y.sin())),
            Op::SoftmaxRows(a) | Op::CausalSoftmax(a) => {
                let (r, c) = out.dims();
                let mut ga = Tensor::zeros(self.value(*a).shape.clone());
                for i in 0..r {
                    let p = out.row_slice(i);
                    let gi = g.row_slice(i);
                    let dot: f64 = p.iter().zip(gi).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        ga.data[i * c + j] = p[j] * (gi[j] - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, Tensor::filled(va.shape.clone(), g.item()));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let n = va.len() as f64;
                self.accumulate(grads, *a, Tensor::filled(va.shape.clone(), g.item() / n));
            }
            Op::LogSumExpRows(a) => {
                let va = self.value(*a);
                let (r, c) = va.dims();
                let mut ga = Tensor::zeros(va.shape.clone());
                for i in 0..r {
                    let l = out.data[i];
                    for j in 0..c {
                        ga.data[i * c + j] = g.data[i] * (va.data[i * c + j] - l).exp();
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::NormalCdf(a) => {
                self.accumulate(grads, *a, g.zip(self.value(*a), |x, y| x * normal_pdf(y)))
            }
            Op::LogNormalCdf(a) => self.accumulate(
                grads,
                *a,
                g.zip(self.value(*a), |x, y| x * normal_hazard_ratio(y)),
            ),
            Op::BroadcastRows(a) => {
                let va = self.value(*a);
                let c = va.cols();
                let mut ga = Tensor::zeros(va.shape.clone());
                for i in 0..g.rows() {
                    for j in 0..c {
                        ga.data[j] += g.data[i * c + j];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::BroadcastCols(a) => {
                let va = self.value(*a);
                let m = g.cols();
                let data = (0..g.rows()).map(|i| g.row_slice(i).iter().sum()).collect();
                let _ = m;
                let t = Tensor {
                    shape: va.shape.clone(),
                    data,
                };
                self.accumulate(grads, *a, t);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.accumulate(
                    grads,
                    *a,
                    g.zip(self.value(*a), |x, y| if y >= lo && y <= hi { x } else { 0.0 }),
                )
            }
            Op::Pick(a, idx) => {
                let va = self.value(*a);
                let c = va.cols();
                let mut ga = Tensor::zeros(va.shape.clone());
                for (i, &k) in idx.iter().enumerate() {
                    ga.data[i * c + k] = g.data[i];
                }
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

fn reshape_like(mut t: Tensor, like: &Tensor) -> Tensor {
    t.shape = like.shape.clone();
    t
}

/// Result of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub passed: bool,
    /// Parameter and flat index of the worst coordinate.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Checks the gradient of the scalar function `f` with respect to every
/// entry of `params`.
///
/// The error for one coordinate is
/// `|analytic − central| / max(1e−8, |central|)` with step
/// `h = 1e−5 · max(1, |θ|)`; the report holds the maximum over coordinates.
pub fn grad_check<F>(f: F, params: &[Tensor], tolerance: f64) -> AdResult<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> AdResult<Var>,
{
    let total: usize = params.iter().map(Tensor::len).sum();
    if total > 10_000 {
        return Err(AutodiffError::Invalid(format!(
            "grad_check limited to 10^4 entries, got {total}"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |ps: &[Tensor]| -> AdResult<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut worst: f64 = 0.0;
    let mut at = (0, 0, 0.0, 0.0);
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].shape.clone()));
        for k in 0..params[pi].len() {
            let theta = params[pi].data[k];
            let h = 1e-5 * theta.abs().max(1.0);
            work[pi].data[k] = theta + h;
            let up = eval(&work)?;
            work[pi].data[k] = theta - h;
            let down = eval(&work)?;
            work[pi].data[k] = theta;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data[k];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(AutodiffError::NonFiniteGradient { param: pi, index: k });
            }
            let err = (a - numeric).abs() / numeric.abs().max(1e-8);
            if err > worst {
                worst = err;
                at = (pi, k, a, numeric);
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        passed: worst < tolerance,
        worst: (at.0, at.1),
        worst_analytic: at.2,
        worst_numeric: at.3,
    })
}
