//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes one
//! node holding its forward value plus whatever it needs for the backward
//! rule; node order is therefore a topological order, and [`Graph::backward`]
//! is a single reverse sweep. Graphs are rebuilt for every forward pass and
//! owned by exactly one training step.
//!
//! ```
//! use lstf_core::autodiff::Graph;
//! use lstf_core::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::from_rows(&[[1.0, 2.0]]));
//! let y = g.scale(x, 3.0);
//! let loss = g.sum(y);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0]);
//! ```

use crate::error::{Error, Result};
use crate::loss::Pointwise;
use crate::tensor::Tensor;

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Square(Var),
    Gelu(Var),
    Mean(Var),
    Sum(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Transpose(Var),
    GatherRows { src: Var, index: Vec<usize> },
    ScatterRows { base: Var, rows: Var, index: Vec<usize> },
    Softmax { x: Var, axis: usize },
    CausalMask { x: Var, positions: Vec<usize> },
    ColumnMean { x: Var },
    CumulativeMean(Var),
    PointwiseMean { pred: Var, target: Var, f: Pointwise },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b)
            | MulCol(a, b) => vec![*a, *b],
            Scale(x, _) | Abs(x) | Square(x) | Gelu(x) | Mean(x) | Sum(x) | Transpose(x)
            | CumulativeMean(x) => vec![*x],
            Concat { inputs, .. } => inputs.clone(),
            GatherRows { src, .. } => vec![*src],
            ScatterRows { base, rows, .. } => vec![*base, *rows],
            Softmax { x, .. } | CausalMask { x, .. } | ColumnMean { x } => vec![*x],
            PointwiseMean { pred, target, .. } => vec![*pred, *target],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// `(outer, extent, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_A * (x + GELU_B * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node. Previously issued [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that accumulates gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never accumulates gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Gradient of the last [`Graph::backward`] call, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(out, op)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(out, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let c = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], c)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `x[i, :] + row[0, :]` for every row `i`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "add_row", Op::AddRow(x, row), |a, b| a + b)
    }

    /// `x[i, :] * row[0, :]` for every row `i`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "mul_row", Op::MulRow(x, row), |a, b| a * b)
    }

    fn row_broadcast(
        &mut self,
        x: Var,
        row: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (m, n) = self.dims2(x, name)?;
        let (r, n2) = self.dims2(row, name)?;
        if r != 1 || n2 != n {
            return Err(Error::Shape {
                op: name,
                left: vec![m, n],
                right: vec![r, n2],
            });
        }
        let (vx, vr) = (self.value(x).data(), self.value(row).data());
        let data = (0..m * n).map(|i| f(vx[i], vr[i % n])).collect();
        Ok(self.push(Tensor::new(vec![m, n], data)?, op))
    }

    /// `x[i, j] * col[i, 0]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "mul_col")?;
        let (m2, c) = self.dims2(col, "mul_col")?;
        if c != 1 || m2 != m {
            return Err(Error::Shape {
                op: "mul_col",
                left: vec![m, n],
                right: vec![m2, c],
            });
        }
        let (vx, vc) = (self.value(x).data(), self.value(col).data());
        let data = (0..m * n).map(|i| vx[i] * vc[i / n]).collect();
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MulCol(x, col)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |a| a * c)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |a| a * a)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), gelu)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if axis > 1 {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: 2,
            });
        }
        let first = *inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let (m0, n0) = self.dims2(first, "concat")?;
        let mut total = 0;
        for &v in inputs {
            let (m, n) = self.dims2(v, "concat")?;
            let (fixed, fixed0, along) = if axis == 0 { (n, n0, m) } else { (m, m0, n) };
            if fixed != fixed0 {
                return Err(Error::Shape {
                    op: "concat",
                    left: vec![m0, n0],
                    right: vec![m, n],
                });
            }
            total += along;
        }
        let out = if axis == 0 {
            let mut data = Vec::with_capacity(total * n0);
            for &v in inputs {
                data.extend_from_slice(self.value(v).data());
            }
            Tensor::new(vec![total, n0], data)?
        } else {
            let mut data = Vec::with_capacity(m0 * total);
            for i in 0..m0 {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row(i));
                }
            }
            Tensor::new(vec![m0, total], data)?
        };
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "transpose")?;
        let t = transpose_raw(self.value(x).data(), m, n);
        Ok(self.push(Tensor::new(vec![n, m], t)?, Op::Transpose(x)))
    }

    /// Rows `index[0], index[1], ...` of `src`, in that order. Duplicates
    /// are allowed.
    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(src, "gather_rows")?;
        if index.is_empty() {
            return Err(Error::InvalidArgument("gather_rows with empty index".into()));
        }
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= m {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    extent: m,
                });
            }
            data.extend_from_slice(self.value(src).row(i));
        }
        Ok(self.push(
            Tensor::new(vec![index.len(), n], data)?,
            Op::GatherRows {
                src,
                index: index.to_vec(),
            },
        ))
    }

    /// Copy of `base` with row `index[r]` replaced by row `r` of `rows`.
    /// `rows` may be `None` only when `index` is empty, in which case the
    /// result equals `base`.
    pub fn scatter_rows(&mut self, base: Var, rows: Option<Var>, index: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(base, "scatter_rows")?;
        let rows = match rows {
            Some(r) => r,
            None if index.is_empty() => {
                let v = self.value(base).clone();
                // Identity: reuse the scatter node with an empty row source.
                return Ok(self.push(
                    v,
                    Op::ScatterRows {
                        base,
                        rows: base,
                        index: vec![],
                    },
                ));
            }
            None => {
                return Err(Error::InvalidArgument(
                    "scatter_rows: index given without rows".into(),
                ))
            }
        };
        let (r, n2) = self.dims2(rows, "scatter_rows")?;
        if n2 != n || r != index.len() {
            return Err(Error::Shape {
                op: "scatter_rows",
                left: vec![m, n],
                right: vec![r, n2],
            });
        }
        let mut seen = vec![false; m];
        let mut out = self.value(base).clone();
        for (k, &i) in index.iter().enumerate() {
            if i >= m {
                return Err(Error::Index {
                    op: "scatter_rows",
                    index: i,
                    extent: m,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!(
                    "scatter_rows: duplicate index {i}"
                )));
            }
            out.data_mut()[i * n..(i + 1) * n].copy_from_slice(self.value(rows).row(k));
        }
        Ok(self.push(
            out,
            Op::ScatterRows {
                base,
                rows,
                index: index.to_vec(),
            },
        ))
    }

    /// Softmax along `axis`, stabilized by subtracting the axis maximum.
    /// Entries equal to `-inf` receive probability zero.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::Axis {
                op: "softmax",
                axis,
                rank: v.rank(),
            });
        }
        let (outer, extent, inner) = split_axis(v.shape(), axis);
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * extent * inner + j * inner + i;
                let max = (0..extent).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..extent {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..extent {
                    out[at(j)] /= total;
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    /// Sets `x[r, j] = -inf` for every `j > positions[r]`.
    pub fn causal_mask(&mut self, x: Var, positions: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x, "causal_mask")?;
        if positions.len() != m {
            return Err(Error::Shape {
                op: "causal_mask",
                left: vec![m, n],
                right: vec![positions.len()],
            });
        }
        let mut out = self.value(x).clone();
        for (r, &p) in positions.iter().enumerate() {
            for j in (p + 1).min(n)..n {
                out.data_mut()[r * n + j] = f64::NEG_INFINITY;
            }
        }
        Ok(self.push(
            out,
            Op::CausalMask {
                x,
                positions: positions.to_vec(),
            },
        ))
    }

    /// A `rows × n` tensor whose every row is the column mean of `x`.
    pub fn column_mean(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "column_mean")?;
        if rows == 0 {
            return Err(Error::InvalidArgument("column_mean with zero rows".into()));
        }
        let v = self.value(x);
        let mut mean = vec![0.0; n];
        for i in 0..m {
            for (acc, a) in mean.iter_mut().zip(v.row(i)) {
                *acc += a;
            }
        }
        for a in &mut mean {
            *a /= m as f64;
        }
        let data = mean.iter().copied().cycle().take(rows * n).collect();
        Ok(self.push(Tensor::new(vec![rows, n], data)?, Op::ColumnMean { x }))
    }

    /// Row `i` of the result is the mean of rows `0..=i` of `x`.
    pub fn cumulative_mean(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "cumulative_mean")?;
        let v = self.value(x);
        let mut running = vec![0.0; n];
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (acc, a) in running.iter_mut().zip(v.row(i)) {
                *acc += a;
            }
            data.extend(running.iter().map(|s| s / (i + 1) as f64));
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::CumulativeMean(x)))
    }

    /// Mean over all elements of `f(pred - target)`.
    pub fn pointwise_mean(&mut self, pred: Var, target: Var, f: Pointwise) -> Result<Var> {
        self.same_shape(pred, target, "pointwise_mean")?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let total: f64 = p.iter().zip(t).map(|(a, b)| f.value(a - b)).sum();
        let mean = total / p.len() as f64;
        Ok(self.push(Tensor::scalar(mean), Op::PointwiseMean { pred, target, f }))
    }

    /// Populates gradients of every node that requires one, with respect to
    /// the scalar `loss`. Gradients from an earlier call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &dy, &mut grads);
            let shape = self.nodes[id].value.shape().to_vec();
            self.nodes[id].grad = Some(Tensor::new(shape, dy)?);
        }
        // Leaves and intermediates that never saw the loss still report a
        // zero gradient when they require one.
        for node in &mut self.nodes[..=loss.0] {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                acc(*a, &|g| {
                    let bt = transpose_raw(val(*b).data(), k, n);
                    let da = matmul_raw(dy, &bt, m, n, k);
                    g.iter_mut().zip(da).for_each(|(x, d)| *x += d);
                });
                acc(*b, &|g| {
                    let at = transpose_raw(val(*a).data(), m, k);
                    let db = matmul_raw(&at, dy, k, m, n);
                    g.iter_mut().zip(db).for_each(|(x, d)| *x += d);
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|g| g.iter_mut().zip(dy).for_each(|(x, d)| *x += d));
                acc(*b, &|g| g.iter_mut().zip(dy).for_each(|(x, d)| *x += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &|g| g.iter_mut().zip(dy).for_each(|(x, d)| *x += d));
                acc(*b, &|g| g.iter_mut().zip(dy).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * vb[i];
                    }
                });
                acc(*b, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * va[i];
                    }
                });
            }
            Op::AddRow(x, row) => {
                let n = val(*row).len();
                acc(*x, &|g| g.iter_mut().zip(dy).for_each(|(a, d)| *a += d));
                acc(*row, &|g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i % n] += d;
                    }
                });
            }
            Op::MulRow(x, row) => {
                let (vx, vr) = (val(*x).data(), val(*row).data());
                let n = vr.len();
                acc(*x, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * vr[i % n];
                    }
                });
                acc(*row, &|g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i % n] += d * vx[i];
                    }
                });
            }
            Op::MulCol(x, col) => {
                let (vx, vc) = (val(*x).data(), val(*col).data());
                let n = val(*x).shape()[1];
                acc(*x, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * vc[i / n];
                    }
                });
                acc(*col, &|g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i / n] += d * vx[i];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &|g| g.iter_mut().zip(dy).for_each(|(a, d)| *a += c * d)),
            Op::Abs(x) => {
                let vx = val(*x).data();
                acc(*x, &|g| {
                    for i in 0..g.len() {
                        let s = if vx[i] > 0.0 {
                            1.0
                        } else if vx[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g[i] += dy[i] * s;
                    }
                });
            }
            Op::Square(x) => {
                let vx = val(*x).data();
                acc(*x, &|g| {
                    for i in 0..g.len() {
                        g[i] += 2.0 * vx[i] * dy[i];
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = val(*x).data();
                acc(*x, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * gelu_grad(vx[i]);
                    }
                });
            }
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc(*x, &|g| g.iter_mut().for_each(|a| *a += dy[0] / n));
            }
            Op::Sum(x) => acc(*x, &|g| g.iter_mut().for_each(|a| *a += dy[0])),
            Op::Concat { inputs, axis } => {
                let total_cols = node.value.shape()[1];
                let mut offset = 0;
                for &v in inputs {
                    let (m, n) = (val(v).shape()[0], val(v).shape()[1]);
                    if *axis == 0 {
                        let start = offset * total_cols;
                        acc(v, &|g| {
                            g.iter_mut()
                                .zip(&dy[start..start + m * n])
                                .for_each(|(a, d)| *a += d)
                        });
                        offset += m;
                    } else {
                        acc(v, &|g| {
                            for i in 0..m {
                                for j in 0..n {
                                    g[i * n + j] += dy[i * total_cols + offset + j];
                                }
                            }
                        });
                        offset += n;
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                acc(*x, &|g| {
                    let t = transpose_raw(dy, n, m);
                    g.iter_mut().zip(t).for_each(|(a, d)| *a += d);
                });
            }
            Op::GatherRows { src, index } => {
                let n = val(*src).shape()[1];
                acc(*src, &|g| {
                    for (r, &i) in index.iter().enumerate() {
                        for j in 0..n {
                            g[i * n + j] += dy[r * n + j];
                        }
                    }
                });
            }
            Op::ScatterRows { base, rows, index } => {
                let n = val(*base).shape()[1];
                acc(*base, &|g| {
                    let mut masked = dy.to_vec();
                    for &i in index {
                        masked[i * n..(i + 1) * n].iter_mut().for_each(|a| *a = 0.0);
                    }
                    g.iter_mut().zip(masked).for_each(|(a, d)| *a += d);
                });
                if !index.is_empty() {
                    acc(*rows, &|g| {
                        for (r, &i) in index.iter().enumerate() {
                            for j in 0..n {
                                g[r * n + j] += dy[i * n + j];
                            }
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, extent, inner) = split_axis(node.value.shape(), *axis);
                acc(*x, &|g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * extent * inner + j * inner + i;
                            let dot: f64 = (0..extent).map(|j| dy[at(j)] * y[at(j)]).sum();
                            for j in 0..extent {
                                g[at(j)] += y[at(j)] * (dy[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::CausalMask { x, positions } => {
                let n = val(*x).shape()[1];
                acc(*x, &|g| {
                    for (r, &p) in positions.iter().enumerate() {
                        for j in 0..=p.min(n - 1) {
                            g[r * n + j] += dy[r * n + j];
                        }
                    }
                });
            }
            Op::ColumnMean { x } => {
                let (m, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                let rows = node.value.shape()[0];
                let mut col = vec![0.0; n];
                for r in 0..rows {
                    for j in 0..n {
                        col[j] += dy[r * n + j];
                    }
                }
                acc(*x, &|g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += col[j] / m as f64;
                        }
                    }
                });
            }
            Op::CumulativeMean(x) => {
                let (m, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                acc(*x, &|g| {
                    // dx_k = sum_{i >= k} dy_i / (i + 1)
                    let mut tail = vec![0.0; n];
                    for k in (0..m).rev() {
                        for j in 0..n {
                            tail[j] += dy[k * n + j] / (k + 1) as f64;
                            g[k * n + j] += tail[j];
                        }
                    }
                });
            }
            Op::PointwiseMean { pred, target, f } => {
                let (p, t) = (val(*pred).data(), val(*target).data());
                let scale = dy[0] / p.len() as f64;
                acc(*pred, &|g| {
                    for i in 0..g.len() {
                        g[i] += scale * f.derivative(p[i] - t[i]);
                    }
                });
                acc(*target, &|g| {
                    for i in 0..g.len() {
                        g[i] -= scale * f.derivative(p[i] - t[i]);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let b = g.constant(Tensor::from_rows(&[[5.0, 6.0], [7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(2));
        let m = Tensor::from_rows(&[[0.3, -1.2], [7.5, 2.0]]);
        let mv = g.constant(m.clone());
        let c = g.matmul(i, mv).unwrap();
        assert_eq!(g.value(c), &m);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[2.0, 2.0, 2.0, 2.0]]));
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);

        let x = g.constant(Tensor::from_rows(&[[0.0, 3f64.ln()]]));
        let y = g.softmax(x, 1).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.softmax(x, 2), Err(Error::Axis { .. })));
    }

    #[test]
    fn gather_and_scatter_basics() {
        let mut g = Graph::new();
        let m = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let x = g.constant(m.clone());
        let all = g.gather_rows(x, &[0, 1, 2]).unwrap();
        assert_eq!(g.value(all), &m);
        let picked = g.gather_rows(x, &[2, 0]).unwrap();
        assert_eq!(g.value(picked).data(), &[5.0, 6.0, 1.0, 2.0]);
        assert!(matches!(g.gather_rows(x, &[3]), Err(Error::Index { .. })));

        let fill = g.constant(Tensor::from_rows(&[[9.0, 8.0], [9.0, 8.0], [9.0, 8.0]]));
        let out = g.scatter_rows(fill, None, &[]).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(out).row(i), &[9.0, 8.0]);
        }
        let out = g.scatter_rows(fill, Some(picked), &[1, 2]).unwrap();
        assert_eq!(g.value(out).data(), &[9.0, 8.0, 5.0, 6.0, 1.0, 2.0]);
        assert!(g.scatter_rows(fill, Some(picked), &[1, 1]).is_err());
    }

    #[test]
    fn backward_linear_and_constant() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[[1.0, -2.0, 0.5]]));
        let y = g.scale(x, 3.0);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0, 3.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[[1.0, 2.0]]));
        let c = g.constant(Tensor::scalar(4.0));
        let _unused = g.scale(x, 2.0);
        g.backward(c).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_never_get_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[[1.0, 2.0]]));
        let c = g.constant(Tensor::from_rows(&[[3.0, 4.0]]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn causal_mask_blocks_future() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let m = g.causal_mask(x, &[0, 2]).unwrap();
        let s = g.softmax(m, 1).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn cumulative_and_column_mean() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0], [3.0], [5.0]]));
        let c = g.cumulative_mean(x).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        let m = g.column_mean(x, 2).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 3.0]);
    }
}
