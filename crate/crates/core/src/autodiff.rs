//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape once in reverse. A tape is single-threaded and is normally
//! rebuilt for every optimisation step.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Exp,
    Log,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Transpose(Var),
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Reduce {
        kind: Reduction,
        input: Var,
        axis: Option<usize>,
    },
    Softmax(Var),
    L2Normalize(Var),
    ConcatRows(Vec<Var>),
    Gather { input: Var, indices: Vec<usize> },
    MaskedLogSumExp {
        input: Var,
        rows: Vec<usize>,
        mask: Vec<bool>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Transpose(a)
            | Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::L2Normalize(a) => vec![*a],
            Op::Reduce { input, .. }
            | Op::Gather { input, .. }
            | Op::MaskedLogSumExp { input, .. } => vec![*input],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Minimum euclidean norm accepted by [`Tape::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Ordered record of executed operations.
#[derive(Debug, Default)]
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

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = value.requires_grad()
            || op
                .inputs()
                .iter()
                .any(|v| self.nodes[v.0].value.requires_grad());
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let c = kernels::matmul(m, k, n, self.value(a).data(), self.value(b).data());
        Ok(self.push(Tensor::matrix(m, n, c)?, Op::MatMul(a, b)))
    }

    /// Affine map `x·wᵀ + b` with `x[m×in]`, `w[out×in]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, i) = self.dims2(x, "linear")?;
        let (o, i2) = self.dims2(w, "linear")?;
        if i != i2 {
            return Err(Error::dim("linear", self.shape(x), self.shape(w)));
        }
        if self.shape(b) != [o] {
            return Err(Error::dim("linear", self.shape(w), self.shape(b)));
        }
        let y = kernels::linear(
            m,
            i,
            o,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        Ok(self.push(Tensor::matrix(m, o, y)?, Op::Linear { x, w, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a)))
    }

    pub fn unary(&mut self, kind: UnaryOp, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data: Vec<f64> = match kind {
            UnaryOp::Relu => {
                let mut d = x.data().to_vec();
                kernels::relu_inplace(&mut d);
                d
            }
            UnaryOp::Exp => x.data().iter().map(|v| v.exp()).collect(),
            UnaryOp::Log => {
                if let Some(bad) = x.data().iter().find(|v| **v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive entry {bad}"),
                    });
                }
                x.data().iter().map(|v| v.ln()).collect()
            }
            UnaryOp::Square => x.data().iter().map(|v| v * v).collect(),
        };
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Unary(kind, a)))
    }

    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim("elementwise", x.shape(), y.shape()));
        }
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryOp::Add => |p, q| p + q,
            BinaryOp::Sub => |p, q| p - q,
            BinaryOp::Mul => |p, q| p * q,
        };
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary(kind, a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, a)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// Adds a length-`n` row to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        if self.shape(row) != [n] {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let mut data = self.value(a).data().to_vec();
        kernels::add_row_inplace(&mut data, self.value(row).data());
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v * c).collect();
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale(a, c)))
    }

    /// Sum or mean over one axis (dropping it) or over everything.
    pub fn reduce(&mut self, kind: Reduction, a: Var, axis: Option<usize>) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let (value, count) = match axis {
            None => {
                let total: f64 = x.data().iter().sum();
                (Tensor::scalar(total), x.numel())
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::InvalidAxis { axis: ax, shape });
                }
                let (outer, len, inner) = split_axis(&shape, ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += x.data()[base + i];
                        }
                    }
                }
                let mut out_shape = shape.clone();
                out_shape.remove(ax);
                let t = if out_shape.is_empty() {
                    Tensor::scalar(out[0])
                } else {
                    Tensor::new(out_shape, out)?
                };
                (t, len)
            }
        };
        let value = match kind {
            Reduction::Sum => value,
            Reduction::Mean => {
                let c = count as f64;
                let shape = value.shape().to_vec();
                Tensor::new(shape, value.into_data().into_iter().map(|v| v / c).collect())?
            }
        };
        Ok(self.push(value, Op::Reduce { kind, input: a, axis }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Sum, a, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Mean, a, None)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let width = *x.shape().last().unwrap_or(&1);
        let data = kernels::softmax_rows(x.data(), width);
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax(a)))
    }

    /// Scales every last-axis slice to unit euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let width = *x.shape().last().unwrap_or(&1);
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(width) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm.is_nan() || norm < NORM_EPS {
                return Err(Error::Degenerate {
                    op: "l2_normalize",
                    detail: format!("norm {norm} below {NORM_EPS}"),
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::L2Normalize(a)))
    }

    /// Vertically stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != n {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::matrix(rows, n, data)?, Op::ConcatRows(parts.to_vec())))
    }

    /// Picks flat-indexed entries into a vector.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if indices.is_empty() {
            return Err(Error::contract("gather with no indices"));
        }
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            data.push(
                *x.data()
                    .get(i)
                    .ok_or_else(|| Error::contract(format!("gather index {i} out of range")))?,
            );
        }
        Ok(self.push(
            Tensor::vector(data)?,
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
        ))
    }

    /// For each output `r`: `log Σ_{j : mask[r][j]} exp(a[rows[r], j])`.
    ///
    /// `mask` is row-major `[rows.len() × cols]`; every mask row needs at
    /// least one selected column.
    pub fn masked_logsumexp(&mut self, a: Var, rows: &[usize], mask: &[bool]) -> Result<Var> {
        let (m, n) = self.dims2(a, "masked_logsumexp")?;
        if mask.len() != rows.len() * n || rows.is_empty() {
            return Err(Error::dim("masked_logsumexp", &[rows.len(), n], &[mask.len()]));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(rows.len());
        for (r, &src) in rows.iter().enumerate() {
            if src >= m {
                return Err(Error::contract(format!("row {src} out of range")));
            }
            let sel = &mask[r * n..(r + 1) * n];
            if !sel.iter().any(|&s| s) {
                return Err(Error::contract(format!("mask row {r} selects nothing")));
            }
            let row = x.row(src);
            let max = row
                .iter()
                .zip(sel)
                .filter(|(_, s)| **s)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                out.push(f64::NAN);
                continue;
            }
            let total: f64 = row
                .iter()
                .zip(sel)
                .filter(|(_, s)| **s)
                .map(|(v, _)| (v - max).exp())
                .sum();
            out.push(max + total.ln());
        }
        Ok(self.push(
            Tensor::vector(out)?,
            Op::MaskedLogSumExp {
                input: a,
                rows: rows.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Accumulates d(loss)/d(node) into every gradient-tracking node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            let (before, rest) = adj.split_at_mut(idx);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            self.propagate(idx, g, before);
        }
        for (node, g) in self.nodes.iter_mut().zip(adj) {
            if let (true, Some(g)) = (node.value.requires_grad(), g) {
                node.value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let tracks = |v: Var| self.nodes[v.0].value.requires_grad();
        macro_rules! acc {
            ($v:expr) => {
                slot(adj, &self.nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = dims(self.value(*b)).1;
                if tracks(*a) {
                    kernels::gemm(m, n, k, g, false, self.value(*b).data(), true, 1.0, acc!(*a));
                }
                if tracks(*b) {
                    kernels::gemm(k, m, n, self.value(*a).data(), true, g, false, 1.0, acc!(*b));
                }
            }
            Op::Linear { x, w, b } => {
                let (m, i) = dims(self.value(*x));
                let o = dims(self.value(*w)).0;
                if tracks(*x) {
                    kernels::gemm(m, o, i, g, false, self.value(*w).data(), false, 1.0, acc!(*x));
                }
                if tracks(*w) {
                    kernels::gemm(o, m, i, g, true, self.value(*x).data(), false, 1.0, acc!(*w));
                }
                if tracks(*b) {
                    kernels::col_sum_into(g, o, acc!(*b));
                }
            }
            Op::Transpose(a) => {
                if tracks(*a) {
                    let (m, n) = dims(self.value(*a));
                    let ga = acc!(*a);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Unary(kind, a) => {
                if tracks(*a) {
                    let x = self.value(*a).data();
                    let y = out.data();
                    let ga = acc!(*a);
                    for t in 0..g.len() {
                        ga[t] += match kind {
                            UnaryOp::Relu => {
                                if x[t] > 0.0 {
                                    g[t]
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Exp => g[t] * y[t],
                            UnaryOp::Log => g[t] / x[t],
                            UnaryOp::Square => g[t] * 2.0 * x[t],
                        };
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if tracks(*a) {
                    let ga = acc!(*a);
                    for t in 0..g.len() {
                        ga[t] += match kind {
                            BinaryOp::Add | BinaryOp::Sub => g[t],
                            BinaryOp::Mul => g[t] * xb[t],
                        };
                    }
                }
                if tracks(*b) {
                    let gb = acc!(*b);
                    for t in 0..g.len() {
                        gb[t] += match kind {
                            BinaryOp::Add => g[t],
                            BinaryOp::Sub => -g[t],
                            BinaryOp::Mul => g[t] * xa[t],
                        };
                    }
                }
            }
            Op::AddRow(a, row) => {
                if tracks(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                if tracks(*row) {
                    let n = self.value(*row).numel();
                    kernels::col_sum_into(g, n, acc!(*row));
                }
            }
            Op::Scale(a, c) => {
                if tracks(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(p, q)| *p += q * c);
                }
            }
            Op::Reduce { kind, input, axis } => {
                if tracks(*input) {
                    let x = self.value(*input);
                    let ga = acc!(*input);
                    match axis {
                        None => {
                            let scale = match kind {
                                Reduction::Sum => 1.0,
                                Reduction::Mean => 1.0 / x.numel() as f64,
                            };
                            ga.iter_mut().for_each(|p| *p += g[0] * scale);
                        }
                        Some(ax) => {
                            let (outer, len, inner) = split_axis(x.shape(), *ax);
                            let scale = match kind {
                                Reduction::Sum => 1.0,
                                Reduction::Mean => 1.0 / len as f64,
                            };
                            for o in 0..outer {
                                for l in 0..len {
                                    let base = (o * len + l) * inner;
                                    for i in 0..inner {
                                        ga[base + i] += g[o * inner + i] * scale;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if tracks(*a) {
                    let width = *out.shape().last().unwrap_or(&1);
                    let ga = acc!(*a);
                    for ((y, gy), gx) in out
                        .data()
                        .chunks(width)
                        .zip(g.chunks(width))
                        .zip(ga.chunks_mut(width))
                    {
                        let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                        for t in 0..width {
                            gx[t] += y[t] * (gy[t] - dot);
                        }
                    }
                }
            }
            Op::L2Normalize(a) => {
                if tracks(*a) {
                    let x = self.value(*a);
                    let width = *out.shape().last().unwrap_or(&1);
                    let ga = acc!(*a);
                    for (((xr, y), gy), gx) in x
                        .data()
                        .chunks(width)
                        .zip(out.data().chunks(width))
                        .zip(g.chunks(width))
                        .zip(ga.chunks_mut(width))
                    {
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                        for t in 0..width {
                            gx[t] += (gy[t] - y[t] * dot) / norm;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if tracks(*p) {
                        acc!(*p)
                            .iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(a, b)| *a += b);
                    }
                    offset += n;
                }
            }
            Op::Gather { input, indices } => {
                if tracks(*input) {
                    let ga = acc!(*input);
                    for (gi, &i) in g.iter().zip(indices) {
                        ga[i] += gi;
                    }
                }
            }
            Op::MaskedLogSumExp { input, rows, mask } => {
                if tracks(*input) {
                    let x = self.value(*input);
                    let n = dims(x).1;
                    let ga = acc!(*input);
                    for (r, &src) in rows.iter().enumerate() {
                        let sel = &mask[r * n..(r + 1) * n];
                        let row = x.row(src);
                        let lse = out.data()[r];
                        for j in 0..n {
                            if sel[j] {
                                ga[src * n + j] += g[r] * (row[j] - lse).exp();
                            }
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut [f64] {
    let n = nodes[v.0].value.numel();
    adj[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn dims(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [r, c] => (*r, *c),
        _ => unreachable!("shape validated at record time"),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
