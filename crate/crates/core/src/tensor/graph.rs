use std::sync::Arc;

use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_trans: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    Scale(Var, f64),
    AddScalar(Var),
    ScaleRows { x: Var, factors: Arc<Vec<f64>> },
    Exp(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
    Gelu(Var),
    Softmax { x: Var },
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Embedding { table: Var, ids: Arc<Vec<usize>> },
    Gather { x: Var, index: Arc<Vec<Option<usize>>> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    CrossEntropy { logits: Var, targets: Arc<Vec<usize>> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Dynamic tape of tensor operations.
///
/// Nodes are appended in execution order, which is already a topological
/// order; backward walks the tape once from the end.
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const K: f64 = 0.044_715;
    let u = C * (x + K * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x);
    (y, dy)
}

fn softmax_rows(x: &[f64], cols: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, (xr, or)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let mr = mask.map(|m| &m[r * cols..(r + 1) * cols]);
        let allowed = |j: usize| mr.is_none_or(|m| m[j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in xr.iter().enumerate() {
            if allowed(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for (j, &v) in xr.iter().enumerate() {
            if allowed(j) {
                let e = (v - max).exp();
                or[j] = e;
                sum += e;
            }
        }
        for v in or.iter_mut() {
            *v /= sum;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// Toggle the non-finite barrier (on by default).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
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

    /// Gradient accumulated on `v` by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape().to_vec(),
            data: g.clone(),
        })
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push_node(Arc::new(value), Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Leaf over an existing shared tensor (model parameters). Not scanned
    /// for non-finite values; every op output still is.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Result<Var> {
        Ok(self.push_node(value, Op::Leaf, requires_grad))
    }

    fn push_node(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_node(Arc::new(value), op, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| f(v)).collect(),
        };
        self.push(name, out, op, &[x])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        };
        self.push(name, out, op, &[a, b])
    }

    /// `a @ b`, both 2-D.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T`; `b` is stored `[n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        let (m, k) = shape2(self.value(a), "matmul")?;
        let (br, bc) = shape2(self.value(b), "matmul")?;
        let (kb, n) = if b_trans { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{:?} x {:?}{}",
                    self.shape(a),
                    self.shape(b),
                    if b_trans { "^T" } else { "" }
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), b_trans, &mut out, 0.0);
        self.push("matmul", Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b, b_trans }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("minimum", a, b, Op::Minimum(a, b), |x, y| if x <= y { x } else { y })
    }

    /// Adds a `[n]` (or `[1, n]`) row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(row).numel() != c {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.shape(x), self.shape(row)),
            ));
        }
        let tx = self.value(x);
        let r = self.value(row).data();
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (v, b) in chunk.iter_mut().zip(r) {
                *v += b;
            }
        }
        let shape = tx.shape().to_vec();
        self.push("add_row", Tensor { shape, data }, Op::AddRow { x, row }, &[x, row])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("scale", x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", x, Op::AddScalar(x), |v| v + c)
    }

    /// Multiplies row `i` of `x` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Arc<Vec<f64>>) -> Result<Var> {
        let tx = self.value(x);
        if tx.rows() != factors.len() {
            return Err(Error::shape(
                "scale_rows",
                format!("{:?} with {} factors", tx.shape(), factors.len()),
            ));
        }
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for (chunk, f) in data.chunks_mut(c).zip(factors.iter()) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let shape = tx.shape().to_vec();
        self.push("scale_rows", Tensor { shape, data }, Op::ScaleRows { x, factors }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, Op::Exp(x), f64::exp)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map("clamp", x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, Op::Gelu(x), |v| gelu_parts(v).0)
    }

    /// Softmax along the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax along the last dimension where `mask[i]` false excludes the
    /// entry (probability exactly zero). Rows with no allowed entry are zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::shape(
                "masked_softmax",
                format!("{:?} with mask of {}", self.shape(x), mask.len()),
            ));
        }
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        if !tx.is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let data = softmax_rows(tx.data(), tx.cols(), mask);
        let shape = tx.shape().to_vec();
        self.push("softmax", Tensor { shape, data }, Op::Softmax { x }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if !tx.is_finite() {
            return Err(Error::NonFinite { op: "log_softmax" });
        }
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = tx.shape().to_vec();
        self.push("log_softmax", Tensor { shape, data }, Op::LogSoftmax(x), &[x])
    }

    /// Layer normalization over the last dimension with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "{:?} with gamma {:?} beta {:?}",
                    tx.shape(),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            let (mean, inv) = ln_stats(row, eps);
            for j in 0..c {
                row[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let shape = tx.shape().to_vec();
        self.push(
            "layer_norm",
            Tensor { shape, data },
            Op::LayerNorm { x, gamma, beta, eps },
            &[x, gamma, beta],
        )
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = shape2(self.value(table), "embedding")?;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape(
                "embedding",
                format!("index {bad} out of range for table {:?}", self.shape(table)),
            ));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let out = Tensor { shape: vec![ids.len(), d], data };
        self.push("embedding", out, Op::Embedding { table, ids: Arc::new(ids.to_vec()) }, &[table])
    }

    /// Flat gather: `out[j] = x[index[j]]`, or 0 where the index is `None`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<Option<usize>>>, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        let tx = self.value(x);
        if n != index.len() || index.iter().flatten().any(|&i| i >= tx.numel()) {
            return Err(Error::shape(
                "gather",
                format!("source {:?}, {} indices, output {shape:?}", tx.shape(), index.len()),
            ));
        }
        let src = tx.data();
        let data = index.iter().map(|i| i.map_or(0.0, |i| src[i])).collect();
        self.push("gather", Tensor { shape, data }, Op::Gather { x, index }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = shape2(self.value(p), "concat_rows")?;
            if pc != c {
                let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
                return Err(Error::shape("concat_rows", format!("{shapes:?}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push("concat_rows", Tensor { shape: vec![rows, c], data }, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = shape2(self.value(p), "concat_cols")?;
            if pr != r {
                let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
                return Err(Error::shape("concat_cols", format!("{shapes:?}")));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push("concat_cols", Tensor { shape: vec![r, c], data }, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = shape2(self.value(x), "slice_rows")?;
        if start + len > r {
            return Err(Error::shape("slice_rows", format!("{:?} rows {start}..{}", self.shape(x), start + len)));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", Tensor { shape: vec![len, c], data }, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = shape2(self.value(x), "slice_cols")?;
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{:?} cols {start}..{}", self.shape(x), start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push("slice_cols", Tensor { shape: vec![r, len], data }, Op::SliceCols { x, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over the leading axis: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = shape2(self.value(x), "mean_rows")?;
        let mut data = vec![0.0; c];
        for row in self.value(x).data().chunks(c) {
            for (o, v) in data.iter_mut().zip(row) {
                *o += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= r as f64);
        self.push("mean_rows", Tensor { shape: vec![1, c], data }, Op::MeanRows(x), &[x])
    }

    /// Mean cross-entropy of `[n, V]` logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = shape2(self.value(logits), "cross_entropy")?;
        if n != targets.len() || targets.iter().any(|&t| t >= v) {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} with {} targets", self.shape(logits), targets.len()),
            ));
        }
        let tl = self.value(logits);
        if !tl.is_finite() {
            return Err(Error::NonFinite { op: "cross_entropy" });
        }
        let mut total = 0.0;
        for (row, &t) in tl.data().chunks(v).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let op = Op::CrossEntropy { logits, targets: Arc::new(targets.to_vec()) };
        self.push("cross_entropy", Tensor::scalar(total / n as f64), op, &[logits])
    }

    /// Reverse pass from a scalar `loss`; gradients accumulate on every node
    /// that requires them. Intermediate gradients are released after use.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 || shape.len() > 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(g);
                continue;
            }
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let out = Arc::clone(&self.nodes[i].value);
        // Borrow of `op` must end before accumulating, so collect first.
        let mut contribs: Vec<(Var, Vec<f64>)> = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, b_trans } => {
                let ta = self.value(a);
                let tb = self.value(b);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = out.shape()[1];
                if self.wants(a) {
                    // dA = dC @ op(B)^T
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, tb.data(), !b_trans, &mut da, 0.0);
                    contribs.push((a, da));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    if b_trans {
                        // B stored [n, k]: dB = dC^T @ A
                        gemm(n, m, k, g, true, ta.data(), false, &mut db, 0.0);
                    } else {
                        gemm(k, m, n, ta.data(), true, g, false, &mut db, 0.0);
                    }
                    contribs.push((b, db));
                }
            }
            &Op::Add(a, b) => {
                contribs.push((a, g.to_vec()));
                contribs.push((b, g.to_vec()));
            }
            &Op::Sub(a, b) => {
                contribs.push((a, g.to_vec()));
                contribs.push((b, g.iter().map(|v| -v).collect()));
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a).data(), self.value(b).data());
                contribs.push((a, g.iter().zip(tb).map(|(g, y)| g * y).collect()));
                contribs.push((b, g.iter().zip(ta).map(|(g, x)| g * x).collect()));
            }
            &Op::Minimum(a, b) => {
                let (ta, tb) = (self.value(a).data(), self.value(b).data());
                let pick_a: Vec<bool> = ta.iter().zip(tb).map(|(x, y)| x <= y).collect();
                contribs.push((a, g.iter().zip(&pick_a).map(|(&g, &p)| if p { g } else { 0.0 }).collect()));
                contribs.push((b, g.iter().zip(&pick_a).map(|(&g, &p)| if p { 0.0 } else { g }).collect()));
            }
            &Op::AddRow { x, row } => {
                contribs.push((x, g.to_vec()));
                if self.wants(row) {
                    let c = out.cols();
                    let mut dr = vec![0.0; c];
                    for chunk in g.chunks(c) {
                        dr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    contribs.push((row, dr));
                }
            }
            &Op::Scale(x, c) => contribs.push((x, g.iter().map(|v| v * c).collect())),
            &Op::AddScalar(x) => contribs.push((x, g.to_vec())),
            Op::ScaleRows { x, factors } => {
                let c = out.cols();
                let mut dx = g.to_vec();
                for (chunk, f) in dx.chunks_mut(c).zip(factors.iter()) {
                    chunk.iter_mut().for_each(|v| *v *= f);
                }
                contribs.push((*x, dx));
            }
            &Op::Exp(x) => contribs.push((x, g.iter().zip(out.data()).map(|(g, y)| g * y).collect())),
            &Op::Clamp { x, lo, hi } => {
                let tx = self.value(x).data();
                contribs.push((
                    x,
                    g.iter()
                        .zip(tx)
                        .map(|(&g, &v)| if v >= lo && v <= hi { g } else { 0.0 })
                        .collect(),
                ));
            }
            &Op::Gelu(x) => {
                let tx = self.value(x).data();
                contribs.push((x, g.iter().zip(tx).map(|(g, &v)| g * gelu_parts(v).1).collect()));
            }
            &Op::Softmax { x } => {
                let c = out.cols();
                let mut dx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(c).zip(out.data().chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                contribs.push((x, dx));
            }
            &Op::LogSoftmax(x) => {
                let c = out.cols();
                let mut dx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(c).zip(out.data().chunks(c)).zip(dx.chunks_mut(c)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        dr[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                contribs.push((x, dx));
            }
            &Op::LayerNorm { x, gamma, beta, eps } => {
                let tx = self.value(x).data();
                let gm = self.value(gamma).data();
                let c = out.cols();
                let mut dx = vec![0.0; tx.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for ((xr, gr), dr) in tx.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let (mean, inv) = ln_stats(xr, eps);
                    for j in 0..c {
                        xhat[j] = (xr[j] - mean) * inv;
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                        dxhat[j] = gr[j] * gm[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dr[j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                contribs.push((x, dx));
                contribs.push((gamma, dg));
                contribs.push((beta, db));
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.cols();
                let mut dt = vec![0.0; tt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                contribs.push((*table, dt));
            }
            Op::Gather { x, index } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (gv, idx) in g.iter().zip(index.iter()) {
                    if let Some(i) = idx {
                        dx[*i] += gv;
                    }
                }
                contribs.push((*x, dx));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    contribs.push((p, g[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let r = out.rows();
                let c = out.cols();
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let mut dp = Vec::with_capacity(r * pc);
                    for i in 0..r {
                        dp.extend_from_slice(&g[i * c + off..i * c + off + pc]);
                    }
                    contribs.push((p, dp));
                    off += pc;
                }
            }
            &Op::SliceRows { x, start } => {
                let tx = self.value(x);
                let c = tx.cols();
                let mut dx = vec![0.0; tx.numel()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                contribs.push((x, dx));
            }
            &Op::SliceCols { x, start } => {
                let tx = self.value(x);
                let (r, c) = (tx.rows(), tx.cols());
                let len = out.cols();
                let mut dx = vec![0.0; tx.numel()];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                contribs.push((x, dx));
            }
            &Op::Reshape(x) => contribs.push((x, g.to_vec())),
            &Op::Sum(x) => contribs.push((x, vec![g[0]; self.value(x).numel()])),
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                contribs.push((x, vec![g[0] / n as f64; n]));
            }
            &Op::MeanRows(x) => {
                let tx = self.value(x);
                let r = tx.rows() as f64;
                let dx = (0..tx.rows()).flat_map(|_| g.iter().map(move |v| v / r)).collect();
                contribs.push((x, dx));
            }
            Op::CrossEntropy { logits, targets } => {
                let tl = self.value(*logits);
                let v = tl.cols();
                let n = targets.len() as f64;
                let mut dx = softmax_rows(tl.data(), v, None);
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * v + t] -= 1.0;
                }
                dx.iter_mut().for_each(|d| *d *= g[0] / n);
                contribs.push((*logits, dx));
            }
        }
        for (v, c) in contribs {
            if self.wants(v) {
                self.accumulate(v, c);
            }
        }
    }
}

fn ln_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[5, 64])).unwrap();
        let l = g.cross_entropy(x, &[0, 1, 2, 63, 7]).unwrap();
        assert!((g.value(l).item() - 64f64.ln()).abs() < 1e-12);
        assert!((64f64.ln() - 4.1589).abs() < 1e-4);
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(3)).unwrap();
        let a = g.constant(Tensor::randn(&[3, 3], 1.0, &mut rng)).unwrap();
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![3.0]), true).unwrap();
        let y = g.mul(x, x).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn softmax_jacobian_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::randn(&[4, 5], 1.0, &mut rng), true).unwrap();
        let w = g.constant(Tensor::randn(&[4, 5], 1.0, &mut rng)).unwrap();
        let s = g.softmax(x).unwrap();
        let p = g.mul(s, w).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        let gx = g.grad(x).unwrap();
        for r in 0..4 {
            let s: f64 = gx.row(r).iter().sum();
            assert!(s.abs() < 1e-14, "row {r} sums to {s}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true).unwrap();
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_barrier() {
        let mut g = Graph::new();
        assert!(g.leaf(Tensor::from_vec(vec![f64::NAN]), false).is_err());
        let x = g.constant(Tensor::from_vec(vec![800.0])).unwrap();
        assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
        g.set_check_finite(false);
        assert!(g.exp(x).is_ok());
    }

    #[test]
    fn masked_softmax_zeroes_excluded_entries() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![1.0, 5.0, 2.0]).unwrap()).unwrap();
        let y = g.masked_softmax(x, &[true, false, true]).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut g = Graph::new();
            let x = g.leaf(Tensor::randn(&[6, 8], 1.0, &mut rng), true).unwrap();
            let w = g.leaf(Tensor::randn(&[8, 8], 0.3, &mut rng), true).unwrap();
            let h = g.matmul(x, w).unwrap();
            let h = g.gelu(h).unwrap();
            let s = g.softmax(h).unwrap();
            let l = g.cross_entropy(s, &[0, 1, 2, 3, 4, 5]).unwrap();
            g.backward(l).unwrap();
            (g.grad(x).unwrap(), g.grad(w).unwrap())
        };
        assert_eq!(run(), run());
    }
}
