use std::rc::Rc;

use super::kernels::{self, matmul, matmul_nt, matmul_tn_acc, sigmoid};
use super::tensor::DTensor;
use crate::error::{Error, Result};

/// Environment variable that turns on the per-op non-finite guard.
pub const DEBUG_ENV: &str = "ELASTIC_ATTN_DEBUG";

/// Handle to a node recorded on a [`Graph`].
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
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MaskedFill(Var, Rc<[bool]>),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Rc<[usize]>,
        probs: Rc<[f64]>,
    },
    Detach,
    Block {
        x: Var,
        row0: usize,
        col0: usize,
    },
    SelectRows(Var, Rc<[usize]>),
    MeanRows(Var, Rc<[usize]>),
    Reshape(Var),
    ScaleByElement {
        x: Var,
        s: Var,
        index: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: DTensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order and backward is a single reverse sweep. A graph supports
/// exactly one backward pass; build a fresh one per forward.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    check_finite: bool,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// New graph; the non-finite guard follows `ELASTIC_ATTN_DEBUG`.
    pub fn new() -> Self {
        let check = std::env::var(DEBUG_ENV).is_ok_and(|v| v == "1");
        Self::with_finite_checks(check)
    }

    pub fn with_finite_checks(check_finite: bool) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: DTensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Trainable input; receives a gradient on backward.
    pub fn param(&mut self, value: DTensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &DTensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<DTensor> {
        self.grad(v)
            .map(|g| DTensor::raw(self.shape(v).to_vec(), g.to_vec()))
    }

    fn push_unchecked(&mut self, value: DTensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: DTensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite {
            if let Some(index) = value.first_non_finite() {
                return Err(Error::NonFinite { op: name, index });
            }
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, rg))
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = DTensor::raw(t.shape().to_vec(), data);
        self.push(name, out, op, &[x])
    }

    // ------------------------------------------------------------------ ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let c = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", DTensor::raw(vec![m, n], c), Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let c = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul_nt", DTensor::raw(vec![m, n], c), Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", DTensor::raw(vec![n, m], out), Op::Transpose(x), &[x])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = DTensor::raw(ta.shape().to_vec(), data);
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`cols` vector to every row of `a` (bias broadcast).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(a);
        if self.value(bias).numel() != n {
            return Err(Error::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let ta = self.value(a);
        let b = self.value(bias).data();
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let out = DTensor::raw(ta.shape().to_vec(), data);
        self.push("add_row", out, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", DTensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", DTensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Concatenates along the last dimension; all inputs share `rows()`.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let (m, _) = self.dims2(first);
        for &x in xs {
            if self.dims2(x).0 != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(x)));
            }
        }
        let widths: Vec<usize> = xs.iter().map(|&x| self.dims2(x).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        let mut shape = self.shape(first).to_vec();
        *shape.last_mut().unwrap() = total;
        self.push("concat_cols", DTensor::raw(shape, out), Op::ConcatCols(xs.to_vec()), xs)
    }

    /// Stacks 2-D inputs vertically; all inputs share `cols()`.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let (_, n) = self.dims2(first);
        let mut rows = 0;
        for &x in xs {
            let (r, c) = self.dims2(x);
            if c != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(x)));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &x in xs {
            out.extend_from_slice(self.value(x).data());
        }
        self.push("concat_rows", DTensor::raw(vec![rows, n], out), Op::ConcatRows(xs.to_vec()), xs)
    }

    /// Replaces entries where `mask` is true with `value`. Filled positions
    /// pass no gradient. `value` may be `-inf` (attention masking).
    pub fn masked_fill(&mut self, x: Var, mask: Rc<[bool]>, value: f64) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.numel() {
            return Err(Error::shape("masked_fill", t.shape(), &[mask.len()]));
        }
        let data: Vec<f64> = t
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        if self.check_finite {
            if let Some(index) = data.iter().zip(mask.iter()).position(|(v, &m)| !m && !v.is_finite()) {
                return Err(Error::NonFinite { op: "masked_fill", index });
            }
        }
        let out = DTensor::raw(t.shape().to_vec(), data);
        let rg = self.requires_grad(x);
        Ok(self.push_unchecked(out, Op::MaskedFill(x, mask), rg))
    }

    /// Row-wise softmax over the last dimension with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if n == 0 {
            return Err(Error::InvalidArgument("softmax over empty last dimension".into()));
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            kernels::softmax_row(row);
        }
        let out = DTensor::raw(t.shape().to_vec(), data);
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, v) = self.dims2(logits);
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= v) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                size: v,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_mut(v).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        loss /= b as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.into(),
            probs: probs.into(),
        };
        self.push("cross_entropy", DTensor::scalar(loss), op, &[logits])
    }

    /// Same values, no gradient path back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push_unchecked(value, Op::Detach, false)
    }

    /// Copies the sub-matrix `[row0, row0+rows) x [col0, col0+cols)`.
    pub fn block(&mut self, x: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if row0 + rows > m || col0 + cols > n {
            return Err(Error::shape("block", &[m, n], &[row0 + rows, col0 + cols]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            out.extend_from_slice(&src[i * n + col0..i * n + col0 + cols]);
        }
        self.push("block", DTensor::raw(vec![rows, cols], out), Op::Block { x, row0, col0 }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, col0: usize, cols: usize) -> Result<Var> {
        let (m, _) = self.dims2(x);
        self.block(x, 0, m, col0, cols)
    }

    pub fn slice_rows(&mut self, x: Var, row0: usize, rows: usize) -> Result<Var> {
        let (_, n) = self.dims2(x);
        self.block(x, row0, rows, 0, n)
    }

    /// Gathers rows by index (embedding lookup); repeated indices accumulate.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Index {
                op: "select_rows",
                index: bad,
                size: m,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let t = DTensor::raw(vec![idx.len(), n], out);
        self.push("select_rows", t, Op::SelectRows(x, idx.into()), &[x])
    }

    /// Mean of the selected rows, as a `1 x cols` tensor.
    pub fn mean_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if idx.is_empty() {
            return Err(Error::InvalidArgument("mean over zero rows".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Index {
                op: "mean_rows",
                index: bad,
                size: m,
            });
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; n];
        for &i in idx {
            for (o, v) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        let k = idx.len() as f64;
        out.iter_mut().for_each(|o| *o /= k);
        self.push("mean_rows", DTensor::raw(vec![1, n], out), Op::MeanRows(x, idx.into()), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// `x * s[index]`, with gradient flowing to both `x` and that element of `s`.
    pub fn scale_by_element(&mut self, x: Var, s: Var, index: usize) -> Result<Var> {
        let size = self.value(s).numel();
        if index >= size {
            return Err(Error::Index {
                op: "scale_by_element",
                index,
                size,
            });
        }
        let c = self.value(s).data()[index];
        let t = self.value(x);
        let out = DTensor::raw(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect());
        self.push("scale_by_element", out, Op::ScaleByElement { x, s, index }, &[x, s])
    }

    // ------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Leaves with `requires_grad` always
    /// end up with a gradient buffer (zeros when unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            self.grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gy);
            self.grads[i] = Some(gy);
        }

        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && g.is_none() {
                *g = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, gy: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let out = &nodes[i].value;

        fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'g mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
        }

        match &nodes[i].op {
            Op::Leaf | Op::Detach => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).cols();
                if wants(a) {
                    let da = matmul_nt(gy, val(b).data(), m, n, k);
                    add_into(acc(grads, nodes, a), &da);
                }
                if wants(b) {
                    matmul_tn_acc(acc(grads, nodes, b), val(a).data(), gy, m, k, n);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).rows();
                if wants(a) {
                    let da = matmul(gy, val(b).data(), m, n, k);
                    add_into(acc(grads, nodes, a), &da);
                }
                if wants(b) {
                    matmul_tn_acc(acc(grads, nodes, b), gy, val(a).data(), m, n, k);
                }
            }
            &Op::Transpose(x) => {
                if wants(x) {
                    let (m, n) = (val(x).rows(), val(x).cols());
                    let g = acc(grads, nodes, x);
                    for r in 0..m {
                        for c in 0..n {
                            g[r * n + c] += gy[c * m + r];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    add_into(acc(grads, nodes, a), gy);
                }
                if wants(b) {
                    add_into(acc(grads, nodes, b), gy);
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    add_into(acc(grads, nodes, a), gy);
                }
                if wants(b) {
                    let g = acc(grads, nodes, b);
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d);
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bv = val(b).data();
                    let g = acc(grads, nodes, a);
                    for ((g, d), y) in g.iter_mut().zip(gy).zip(bv) {
                        *g += d * y;
                    }
                }
                if wants(b) {
                    let av = val(a).data();
                    let g = acc(grads, nodes, b);
                    for ((g, d), x) in g.iter_mut().zip(gy).zip(av) {
                        *g += d * x;
                    }
                }
            }
            &Op::AddRow(a, bias) => {
                if wants(a) {
                    add_into(acc(grads, nodes, a), gy);
                }
                if wants(bias) {
                    let n = val(bias).numel();
                    let g = acc(grads, nodes, bias);
                    for row in gy.chunks(n) {
                        add_into(g, row);
                    }
                }
            }
            &Op::Scale(x, c) => {
                if wants(x) {
                    let g = acc(grads, nodes, x);
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d * c);
                }
            }
            &Op::AddScalar(x) => {
                if wants(x) {
                    add_into(acc(grads, nodes, x), gy);
                }
            }
            &Op::Exp(x) => {
                if wants(x) {
                    let g = acc(grads, nodes, x);
                    for ((g, d), y) in g.iter_mut().zip(gy).zip(out.data()) {
                        *g += d * y;
                    }
                }
            }
            &Op::Log(x) => {
                if wants(x) {
                    let xv = val(x).data();
                    let g = acc(grads, nodes, x);
                    for ((g, d), x) in g.iter_mut().zip(gy).zip(xv) {
                        *g += d / x;
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if wants(x) {
                    let g = acc(grads, nodes, x);
                    for ((g, d), y) in g.iter_mut().zip(gy).zip(out.data()) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            &Op::Relu(x) => {
                if wants(x) {
                    let xv = val(x).data();
                    let g = acc(grads, nodes, x);
                    for ((g, d), x) in g.iter_mut().zip(gy).zip(xv) {
                        if *x > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if wants(x) {
                    let d = gy[0];
                    acc(grads, nodes, x).iter_mut().for_each(|g| *g += d);
                }
            }
            &Op::Mean(x) => {
                if wants(x) {
                    let d = gy[0] / val(x).numel() as f64;
                    acc(grads, nodes, x).iter_mut().for_each(|g| *g += d);
                }
            }
            Op::ConcatCols(xs) => {
                let m = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &x in xs {
                    let w = val(x).cols();
                    if wants(x) {
                        let g = acc(grads, nodes, x);
                        for r in 0..m {
                            add_into(&mut g[r * w..(r + 1) * w], &gy[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = val(x).numel();
                    if wants(x) {
                        add_into(acc(grads, nodes, x), &gy[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::MaskedFill(x, mask) => {
                let x = *x;
                if wants(x) {
                    let g = acc(grads, nodes, x);
                    for ((g, d), &m) in g.iter_mut().zip(gy).zip(mask.iter()) {
                        if !m {
                            *g += d;
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                if wants(x) {
                    let n = out.cols();
                    let g = acc(grads, nodes, x);
                    for ((grow, drow), yrow) in g.chunks_mut(n).zip(gy.chunks(n)).zip(out.data().chunks(n)) {
                        let s: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                        for ((g, d), y) in grow.iter_mut().zip(drow).zip(yrow) {
                            *g += y * (d - s);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let logits = *logits;
                if wants(logits) {
                    let v = val(logits).cols();
                    let scale = gy[0] / labels.len() as f64;
                    let g = acc(grads, nodes, logits);
                    for (r, &l) in labels.iter().enumerate() {
                        for c in 0..v {
                            let onehot = if c == l { 1.0 } else { 0.0 };
                            g[r * v + c] += scale * (probs[r * v + c] - onehot);
                        }
                    }
                }
            }
            &Op::Block { x, row0, col0 } => {
                if wants(x) {
                    let n = val(x).cols();
                    let (rows, cols) = (out.rows(), out.cols());
                    let g = acc(grads, nodes, x);
                    for r in 0..rows {
                        let dst = (row0 + r) * n + col0;
                        add_into(&mut g[dst..dst + cols], &gy[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::SelectRows(x, idx) => {
                let x = *x;
                if wants(x) {
                    let n = val(x).cols();
                    let g = acc(grads, nodes, x);
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut g[i * n..(i + 1) * n], &gy[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::MeanRows(x, idx) => {
                let x = *x;
                if wants(x) {
                    let n = val(x).cols();
                    let k = idx.len() as f64;
                    let g = acc(grads, nodes, x);
                    for &i in idx.iter() {
                        for (g, d) in g[i * n..(i + 1) * n].iter_mut().zip(gy) {
                            *g += d / k;
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if wants(x) {
                    add_into(acc(grads, nodes, x), gy);
                }
            }
            &Op::ScaleByElement { x, s, index } => {
                let c = val(s).data()[index];
                if wants(x) {
                    let g = acc(grads, nodes, x);
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d * c);
                }
                if wants(s) {
                    let dot = kernels::dot(gy, val(x).data());
                    acc(grads, nodes, s)[index] += dot;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
