//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order. Since an op can
//! only consume values that already exist, creation order is a topological
//! order, and [`Graph::backward`] simply walks the tape in reverse. The
//! accumulation order is therefore fixed and results are bitwise
//! reproducible.
//!
//! Every op checks its output: NaN or infinity is reported as
//! [`Error::Numeric`]. The only exception is `-inf` produced by
//! [`Graph::mask_fill`], which [`Graph::softmax`] accepts as a mask.

pub mod kernels;

use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
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
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    MaskFill { x: Var, keep: Vec<bool> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<Option<usize>> },
    BroadcastRows(Var),
    Reshape(Var),
    Sum(Var),
    MeanRows(Var),
    SoftRankedCe { logits: Var, grad: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// One evaluation context: values, the ops that produced them and, after
/// [`Graph::backward`], their gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if let Some(v) = data.iter().find(|v| !v.is_finite()) {
        bail!(Numeric, "{op} produced non-finite value {v}");
    }
    Ok(())
}

fn dims2(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        bail!(Shape, "{op} expects a rank-2 tensor, got shape {:?}", t.shape());
    }
    Ok((t.shape()[0], t.shape()[1]))
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Its gradient is tracked when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        check_finite("leaf", value.data())?;
        let needs_grad = value.requires_grad();
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value.with_requires_grad(false))
    }

    /// Records a leaf that always receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last `backward` call with respect to `v`, if `v`
    /// participated and tracks gradients.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            bail!(Dimension, "matmul inner extents differ: {m}×{k} · {k2}×{n}");
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        check_finite("matmul", &out)?;
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "transpose")?;
        let out = kernels::transpose(self.value(a).data(), m, n);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(Dimension, "add of {:?} and {:?}", self.shape(a), self.shape(b));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        check_finite("add", &out)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "add_row")?;
        if self.value(row).numel() != n {
            bail!(Dimension, "add_row of {m}×{n} and {:?}", self.shape(row));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(n.max(1)).take(m) {
            chunk.iter_mut().zip(r).for_each(|(o, b)| *o += b);
        }
        check_finite("add_row", &out)?;
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(Dimension, "mul of {:?} and {:?}", self.shape(a), self.shape(b));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        check_finite("mul", &out)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), &[a, b]))
    }

    /// Scales row `i` of an `m×n` matrix by entry `i` of an `m×1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "mul_col")?;
        if self.value(col).numel() != m {
            bail!(Dimension, "mul_col of {m}×{n} and {:?}", self.shape(col));
        }
        let c = self.value(col).data();
        let mut out = self.value(a).data().to_vec();
        if n > 0 {
            for (chunk, s) in out.chunks_exact_mut(n).zip(c) {
                chunk.iter_mut().for_each(|o| *o *= s);
            }
        }
        check_finite("mul_col", &out)?;
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MulCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * s).collect();
        check_finite("scale", &out)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Scale(a, s), &[a]))
    }

    fn unary(&mut self, a: Var, name: &str, f: fn(f64) -> f64, op: Op) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| f(x)).collect();
        check_finite(name, &out)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, op, &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "softplus", kernels::softplus, Op::Softplus(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "gelu", kernels::gelu, Op::Gelu(a))
    }

    /// Softmax along `axis`. `-inf` entries act as masks; a lane that is
    /// entirely `-inf` yields zeros.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            bail!(Argument, "softmax axis {axis} out of range for shape {shape:?}");
        }
        if let Some(v) = t.data().iter().find(|v| v.is_nan() || **v == f64::INFINITY) {
            bail!(Numeric, "softmax input contains {v}");
        }
        let (outer, len, inner) = lanes(&shape, axis);
        let mut out = vec![0.0; t.numel()];
        for o in 0..outer {
            for i in 0..inner {
                kernels::softmax_lane(t.data(), &mut out, o * len * inner + i, len, inner);
            }
        }
        check_finite("softmax", &out)?;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }, &[x]))
    }

    /// Replaces entries whose `keep` flag is false with `-inf`.
    pub fn mask_fill(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        let t = self.value(x);
        if keep.len() != t.numel() {
            bail!(Dimension, "mask of {} entries for tensor {:?}", keep.len(), t.shape());
        }
        let out: Vec<f64> = t
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { f64::NEG_INFINITY })
            .collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::MaskFill { x, keep }, &[x]))
    }

    /// Row-wise layer normalisation with affine gain and bias (`1×D` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, d) = dims2(self.value(x), "layer_norm")?;
        if d == 0 {
            bail!(Argument, "layer_norm needs at least one feature");
        }
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            bail!(Dimension, "layer_norm affine extents differ from {d}");
        }
        let xs = self.value(x).data();
        let gs = self.value(gain).data();
        let bs = self.value(bias).data();
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gs[c] + bs[c];
            }
        }
        check_finite("layer_norm", &out)?;
        Ok(self.push(
            Tensor::new(&[m, d], out)?,
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            &[x, gain, bias],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            bail!(Argument, "concat_cols of nothing");
        }
        let m = dims2(self.value(parts[0]), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims2(self.value(p), "concat_cols")?;
            if pm != m {
                bail!(Dimension, "concat_cols row counts {pm} and {m}");
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            bail!(Argument, "concat_rows of nothing");
        }
        let n = dims2(self.value(parts[0]), "concat_rows")?.1;
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = dims2(self.value(p), "concat_rows")?;
            if pn != n {
                bail!(Dimension, "concat_rows column counts {pn} and {n}");
            }
            m += pm;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "slice_rows")?;
        if start > end || end > m {
            bail!(Argument, "row slice {start}..{end} of {m} rows");
        }
        let out = self.value(x).data()[start * n..end * n].to_vec();
        Ok(self.push(Tensor::new(&[end - start, n], out)?, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "slice_cols")?;
        if start > end || end > n {
            bail!(Argument, "column slice {start}..{end} of {n} columns");
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        Ok(self.push(Tensor::new(&[m, end - start], out)?, Op::SliceCols { x, start }, &[x]))
    }

    /// Gathers rows by index; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "gather_rows")?;
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= m) {
            bail!(Argument, "gather index {bad} out of {m} rows");
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; index.len() * n];
        for (r, i) in index.iter().enumerate() {
            if let Some(i) = i {
                out[r * n..(r + 1) * n].copy_from_slice(&src[i * n..(i + 1) * n]);
            }
        }
        let rows = index.len();
        Ok(self.push(Tensor::new(&[rows, n], out)?, Op::GatherRows { x, index }, &[x]))
    }

    /// Repeats a single row `m` times.
    pub fn broadcast_rows(&mut self, x: Var, m: usize) -> Result<Var> {
        let (r, n) = dims2(self.value(x), "broadcast_rows")?;
        if r != 1 {
            bail!(Shape, "broadcast_rows expects one row, got {r}");
        }
        let row = self.value(x).data().to_vec();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&row);
        }
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::BroadcastRows(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().with_requires_grad(false);
        let t = Tensor::new(shape, t.into_data())
            .map_err(|_| Error::Shape(format!("cannot reshape {:?} into {:?}", self.shape(x), shape)))?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        check_finite("sum", &[s])?;
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    /// Column means of an `m×n` matrix as a `1×n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "mean_rows")?;
        if m == 0 {
            bail!(Argument, "mean over zero rows");
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; n];
        for r in 0..m {
            out.iter_mut().zip(&src[r * n..(r + 1) * n]).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Tensor::new(&[1, n], out)?, Op::MeanRows(x), &[x]))
    }

    /// `-log(Σ_{positive} softmax(logits))`. With no positive label the
    /// result is an exact zero constant that passes no gradient.
    pub fn soft_ranked_ce(&mut self, logits: Var, positive: &[bool]) -> Result<Var> {
        let z = self.value(logits).data();
        if positive.len() != z.len() {
            bail!(Dimension, "{} labels for {} logits", positive.len(), z.len());
        }
        if z.is_empty() {
            bail!(Argument, "soft-ranked cross-entropy over zero classes");
        }
        if z.iter().any(|v| v.is_nan()) {
            bail!(Numeric, "NaN logit");
        }
        check_finite("soft_ranked_ce input", z)?;
        if !positive.iter().any(|&p| p) {
            return self.constant(Tensor::scalar(0.0));
        }
        let lse_all = kernels::logsumexp_masked(z, |_| true);
        let lse_pos = kernels::logsumexp_masked(z, |i| positive[i]);
        // Clamp the rounding residue when every class is positive.
        let loss = (lse_all - lse_pos).max(0.0);
        let grad: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let p = (v - lse_all).exp();
                let q = if positive[i] { (v - lse_pos).exp() } else { 0.0 };
                p - q
            })
            .collect();
        check_finite("soft_ranked_ce", &[loss])?;
        Ok(self.push(Tensor::scalar(loss), Op::SoftRankedCe { logits, grad }, &[logits]))
    }

    /// Reverse sweep from a scalar. Gradients from a previous sweep are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            bail!(Shape, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                acc(*a, &mut |buf| kernels::matmul_a_bt_acc(g, val(*b).data(), buf, m, n, k));
                acc(*b, &mut |buf| kernels::matmul_at_b_acc(val(*a).data(), g, buf, m, k, n));
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                let gt = kernels::transpose(g, n, m);
                acc(*a, &mut |buf| add_into(buf, &gt));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |buf| add_into(buf, g));
                let n = val(*row).numel();
                acc(*row, &mut |buf| {
                    if n > 0 {
                        for chunk in g.chunks_exact(n) {
                            add_into(buf, chunk);
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |buf| {
                    for ((o, gi), y) in buf.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, gi), x) in buf.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            Op::MulCol(a, col) => {
                let n = val(*a).shape()[1];
                let (av, cv) = (val(*a).data(), val(*col).data());
                acc(*a, &mut |buf| {
                    if n > 0 {
                        for ((orow, grow), s) in buf.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(cv) {
                            orow.iter_mut().zip(grow).for_each(|(o, gi)| *o += gi * s);
                        }
                    }
                });
                acc(*col, &mut |buf| {
                    if n > 0 {
                        for ((o, grow), arow) in buf.iter_mut().zip(g.chunks_exact(n)).zip(av.chunks_exact(n)) {
                            *o += grow.iter().zip(arow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi * s);
            }),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |buf| {
                    for ((o, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Softplus(a) => {
                let x = val(*a).data();
                acc(*a, &mut |buf| {
                    for ((o, gi), xi) in buf.iter_mut().zip(g).zip(x) {
                        *o += gi * kernels::sigmoid(*xi);
                    }
                });
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                acc(*a, &mut |buf| {
                    for ((o, gi), xi) in buf.iter_mut().zip(g).zip(x) {
                        *o += gi * kernels::gelu_grad(*xi);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = lanes(node.value.shape(), *axis);
                acc(*x, &mut |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len)
                                .map(|j| y[base + j * inner] * g[base + j * inner])
                                .sum();
                            for j in 0..len {
                                let idx = base + j * inner;
                                buf[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskFill { x, keep } => acc(*x, &mut |buf| {
                for ((o, gi), k) in buf.iter_mut().zip(g).zip(keep) {
                    if *k {
                        *o += gi;
                    }
                }
            }),
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = node.value.shape()[1];
                let gv = val(*gain).data();
                acc(*x, &mut |buf| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        let scale = is / d as f64;
                        for c in 0..d {
                            buf[r * d + c] += scale * (d as f64 * dh[c] - sum_dh - hrow[c] * sum_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |buf| {
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        buf.iter_mut().zip(grow.iter().zip(hrow)).for_each(|(o, (a, b))| *o += a * b);
                    }
                });
                acc(*bias, &mut |buf| {
                    for grow in g.chunks_exact(d) {
                        add_into(buf, grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).shape()[1];
                    acc(*p, &mut |buf| {
                        if w > 0 {
                            for (r, orow) in buf.chunks_exact_mut(w).enumerate() {
                                add_into(orow, &g[r * n + offset..r * n + offset + w]);
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).numel();
                    acc(*p, &mut |buf| add_into(buf, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.value.shape()[1];
                acc(*x, &mut |buf| add_into(&mut buf[start * n..start * n + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let n = val(*x).shape()[1];
                let w = node.value.shape()[1];
                acc(*x, &mut |buf| {
                    if w > 0 {
                        for (r, grow) in g.chunks_exact(w).enumerate() {
                            add_into(&mut buf[r * n + start..r * n + start + w], grow);
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let n = node.value.shape()[1];
                acc(*x, &mut |buf| {
                    for (r, i) in index.iter().enumerate() {
                        if let Some(i) = i {
                            add_into(&mut buf[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                        }
                    }
                });
            }
            Op::BroadcastRows(x) => {
                let n = val(*x).numel();
                acc(*x, &mut |buf| {
                    if n > 0 {
                        for chunk in g.chunks_exact(n) {
                            add_into(buf, chunk);
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, g)),
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::MeanRows(x) => {
                let m = val(*x).shape()[0];
                let inv = 1.0 / m as f64;
                acc(*x, &mut |buf| {
                    if !g.is_empty() {
                        for chunk in buf.chunks_exact_mut(g.len()) {
                            chunk.iter_mut().zip(g).for_each(|(o, gi)| *o += gi * inv);
                        }
                    }
                });
            }
            Op::SoftRankedCe { logits, grad } => acc(*logits, &mut |buf| {
                buf.iter_mut().zip(grad).for_each(|(o, d)| *o += g[0] * d);
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Splits a shape around `axis` into (outer, axis length, inner stride).
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests;
