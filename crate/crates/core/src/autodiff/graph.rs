use std::sync::Arc;

use super::kernels;
use super::tensor::Tensor;
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fixed sparse linear map over rows: `out[r] = Σ w · in[c]`.
///
/// Gathers, scatter-means, pooling between voxel strides and bilinear
/// image sampling are all instances of this map.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMix {
    n_in: usize,
    offsets: Vec<usize>,
    index: Vec<usize>,
    weight: Vec<f64>,
}

impl RowMix {
    pub fn from_rows(n_in: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut index = Vec::new();
        let mut weight = Vec::new();
        offsets.push(0);
        for r in rows {
            for &(c, w) in r {
                assert!(c < n_in, "row mix column {c} out of range {n_in}");
                index.push(c);
                weight.push(w);
            }
            offsets.push(index.len());
        }
        RowMix { n_in, offsets, index, weight }
    }

    /// `out[i] = in[idx[i]]`
    pub fn gather(n_in: usize, idx: &[usize]) -> Self {
        let rows: Vec<Vec<(usize, f64)>> = idx.iter().map(|&i| vec![(i, 1.0)]).collect();
        RowMix::from_rows(n_in, &rows)
    }

    /// `out[g]` is the mean of every `in[i]` with `assignment[i] == g`.
    pub fn mean_pool(n_out: usize, assignment: &[usize]) -> Self {
        let mut members = vec![Vec::new(); n_out];
        for (i, &g) in assignment.iter().enumerate() {
            members[g].push(i);
        }
        let rows: Vec<Vec<(usize, f64)>> = members
            .into_iter()
            .map(|m| {
                let w = 1.0 / m.len().max(1) as f64;
                m.into_iter().map(|i| (i, w)).collect()
            })
            .collect();
        RowMix::from_rows(assignment.len(), &rows)
    }

    /// Place input row `i` at output row `positions[i]`; other rows are zero.
    pub fn scatter(n_out: usize, positions: &[usize]) -> Self {
        let mut rows = vec![Vec::new(); n_out];
        for (i, &p) in positions.iter().enumerate() {
            rows[p].push((i, 1.0));
        }
        RowMix::from_rows(positions.len(), &rows)
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.offsets[r], self.offsets[r + 1]);
        self.index[s..e].iter().copied().zip(self.weight[s..e].iter().copied())
    }

    /// `self ∘ inner`: apply `inner` first, then `self`.
    pub fn compose(&self, inner: &RowMix) -> RowMix {
        assert_eq!(self.n_in, inner.n_out(), "row mix composition mismatch");
        let rows: Vec<Vec<(usize, f64)>> = (0..self.n_out())
            .map(|r| {
                let mut acc: Vec<(usize, f64)> = Vec::new();
                for (mid, w) in self.row(r) {
                    for (c, w2) in inner.row(mid) {
                        match acc.iter_mut().find(|(k, _)| *k == c) {
                            Some(e) => e.1 += w * w2,
                            None => acc.push((c, w * w2)),
                        }
                    }
                }
                acc.sort_by_key(|e| e.0);
                acc
            })
            .collect();
        RowMix::from_rows(inner.n_in, &rows)
    }

    pub fn apply(&self, x: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_out() * cols];
        for (r, orow) in out.chunks_mut(cols.max(1)).enumerate().take(self.n_out()) {
            for (c, w) in self.row(r) {
                let xrow = &x[c * cols..(c + 1) * cols];
                for (o, &v) in orow.iter_mut().zip(xrow) {
                    *o += w * v;
                }
            }
        }
        out
    }

    fn apply_transpose_into(&self, dy: &[f64], cols: usize, dx: &mut [f64]) {
        for r in 0..self.n_out() {
            let drow = &dy[r * cols..(r + 1) * cols];
            for (c, w) in self.row(r) {
                let xrow = &mut dx[c * cols..(c + 1) * cols];
                for (o, &v) in xrow.iter_mut().zip(drow) {
                    *o += w * v;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Mix(NodeId, Arc<RowMix>),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    LayerNorm(NodeId, Vec<f64>),
    Sum(NodeId),
    Mean(NodeId),
    SumCols(NodeId),
    SumRows(NodeId),
    Sin(NodeId),
    Cos(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of primitive ops.
///
/// Every op evaluates eagerly when it is added, so the node list is already
/// in topological order. [`Graph::backward`] walks it in reverse.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        self.leaf_grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    /// Record a leaf. Its gradient is tracked when `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let rg = tensor.requires_grad;
        let mut t = tensor;
        t.grad = None;
        t.requires_grad = rg;
        self.push(t, Op::Leaf, rg)
    }

    /// Record a constant leaf.
    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        let mut t = tensor;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Copy of a node's value with no gradient link.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    fn v(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.v(a), self.v(b));
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let out = kernels::matmul_nn(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.v(a), self.v(b));
        let (m, k, n, k2) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("{:?} x {:?}ᵀ", ta.shape(), tb.shape())));
        }
        let out = kernels::matmul_nt(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let t = self.v(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(c, r, out), Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (ta, tb) = (self.v(a), self.v(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: NodeId, b: NodeId, f: fn(f64, f64) -> f64, rec: Op) -> Result<NodeId> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.v(a), self.v(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rec, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Add a row vector to every row of `a` (leading-axis repetition).
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (ta, tr) = (self.v(a), self.v(row));
        let c = ta.cols();
        if tr.len() != c {
            return Err(shape_err("add_row", format!("{:?} + row {:?}", ta.shape(), tr.shape())));
        }
        let mut data = ta.data().to_vec();
        if c > 0 {
            for r in data.chunks_mut(c) {
                for (x, &b) in r.iter_mut().zip(tr.data()) {
                    *x += b;
                }
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, row]);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    /// Multiply by a one-element node.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.v(s).len() != 1 {
            return Err(shape_err("mul_scalar", format!("scalar operand has shape {:?}", self.v(s).shape())));
        }
        let k = self.v(s).item();
        let ta = self.v(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * k).collect());
        let rg = self.rg(&[a, s]);
        Ok(self.push(t, Op::MulScalar(a, s), rg))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, rec: Op) -> NodeId {
        let ta = self.v(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(&[a]);
        self.push(t, rec, rg)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| x + k, Op::AddConst(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, kernels::softplus, Op::Softplus(a))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let ta = self.v(a);
        let t = Tensor::new(ta.shape().to_vec(), kernels::softmax_rows(ta.data(), ta.cols()));
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let ta = self.v(a);
        let t = Tensor::new(ta.shape().to_vec(), kernels::log_softmax_rows(ta.data(), ta.cols()));
        let rg = self.rg(&[a]);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    /// Normalize every row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let ta = self.v(a);
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        let mut inv_std = Vec::with_capacity(ta.rows());
        if c > 0 {
            for r in data.chunks_mut(c) {
                let mean = r.iter().sum::<f64>() / c as f64;
                let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for x in r.iter_mut() {
                    *x = (*x - mean) * is;
                }
                inv_std.push(is);
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(t, Op::LayerNorm(a, inv_std), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.v(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.v(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sum over the last axis: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let t = self.v(a);
        let c = t.cols();
        let data: Vec<f64> = (0..t.rows()).map(|r| t.data()[r * c..(r + 1) * c].iter().sum()).collect();
        let rows = data.len();
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(rows, 1, data), Op::SumCols(a), rg)
    }

    /// Sum over rows: `[r, c] -> [1, c]`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.v(a);
        let c = t.cols();
        let mut data = vec![0.0; c];
        for r in 0..t.rows() {
            for (o, v) in data.iter_mut().zip(&t.data()[r * c..(r + 1) * c]) {
                *o += v;
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(1, c, data), Op::SumRows(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().map_or(0, |p| self.v(*p).rows());
        if parts.iter().any(|p| self.v(*p).rows() != rows) {
            let shapes: Vec<_> = parts.iter().map(|p| self.v(*p).shape().to_vec()).collect();
            return Err(shape_err("concat_cols", format!("row counts differ: {shapes:?}")));
        }
        let total: usize = parts.iter().map(|p| self.v(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let t = self.v(*p);
                data.extend_from_slice(&t.data()[r * t.cols()..(r + 1) * t.cols()]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(rows, total, data), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts.first().map_or(0, |p| self.v(*p).cols());
        if parts.iter().any(|p| self.v(*p).cols() != cols) {
            let shapes: Vec<_> = parts.iter().map(|p| self.v(*p).shape().to_vec()).collect();
            return Err(shape_err("concat_rows", format!("column counts differ: {shapes:?}")));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.v(*p);
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.v(a);
        let c = t.cols();
        if start > end || end > c {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {:?}", t.shape())));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(t.rows() * w);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.data()[r * c + start..r * c + end]);
        }
        let rows = t.rows();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(rows, w, data), Op::SliceCols(a, start, end), rg))
    }

    /// Apply a sparse row map.
    pub fn mix(&mut self, a: NodeId, map: &Arc<RowMix>) -> Result<NodeId> {
        let t = self.v(a);
        if t.rows() != map.n_in() {
            return Err(shape_err("mix", format!("map expects {} rows, input {:?}", map.n_in(), t.shape())));
        }
        let c = t.cols();
        let out = map.apply(t.data(), c);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(map.n_out(), c, out), Op::Mix(a, Arc::clone(map)), rg))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let n = self.v(a).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather_rows", format!("index {bad} out of {n} rows")));
        }
        self.mix(a, &Arc::new(RowMix::gather(n, idx)))
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        self.leaf_grads[id.0].as_ref().map(|g| Tensor::new(self.nodes[id.0].value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::NotScalar(self.nodes[loss.0].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let nodes = &self.nodes;
        let mut acc = |id: NodeId, f: &dyn Fn(&mut [f64])| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.v(*a), self.v(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &|s| add_into(s, &kernels::matmul_nt(g, tb.data(), m, n, k)));
                acc(*b, &|s| add_into(s, &kernels::matmul_tn(ta.data(), g, m, k, n)));
            }
            Op::MatMulNT(a, b) => {
                // out[m,n] = a[m,k] b[n,k]ᵀ
                let (ta, tb) = (self.v(*a), self.v(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                acc(*a, &|s| add_into(s, &kernels::matmul_nn(g, tb.data(), m, n, k)));
                acc(*b, &|s| add_into(s, &kernels::matmul_tn(g, ta.data(), m, n, k)));
            }
            Op::Transpose(a) => {
                let (r, c) = (self.v(*a).rows(), self.v(*a).cols());
                acc(*a, &|s| {
                    for x in 0..r {
                        for y in 0..c {
                            s[x * c + y] += g[y * r + x];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::AddRow(a, row) => {
                acc(*a, &|s| add_into(s, g));
                let c = self.v(*a).cols();
                acc(*row, &|s| {
                    for r in g.chunks(c.max(1)) {
                        add_into(s, r);
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.v(*a).data(), self.v(*b).data());
                acc(*a, &|s| s.iter_mut().zip(g).zip(tb).for_each(|((x, d), y)| *x += d * y));
                acc(*b, &|s| s.iter_mut().zip(g).zip(ta).for_each(|((x, d), y)| *x += d * y));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.v(*a).data(), self.v(*b).data());
                acc(*a, &|s| s.iter_mut().zip(g).zip(tb).for_each(|((x, d), y)| *x += d / y));
                acc(*b, &|s| {
                    for j in 0..s.len() {
                        s[j] -= g[j] * ta[j] / (tb[j] * tb[j]);
                    }
                });
            }
            Op::MulScalar(a, k) => {
                let kv = self.v(*k).item();
                let ta = self.v(*a).data();
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(x, d)| *x += d * kv));
                acc(*k, &|s| s[0] += g.iter().zip(ta).map(|(d, x)| d * x).sum::<f64>());
            }
            Op::Scale(a, k) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(x, d)| *x += d * k)),
            Op::AddConst(a) => acc(*a, &|s| add_into(s, g)),
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut off = 0;
                for p in parts {
                    let c = self.v(*p).cols();
                    let rows = self.v(*p).rows();
                    acc(*p, &|s| {
                        for r in 0..rows {
                            add_into(&mut s[r * c..(r + 1) * c], &g[r * total + off..r * total + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.v(*p).len();
                    acc(*p, &|s| add_into(s, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SliceCols(a, start, end) => {
                let c = self.v(*a).cols();
                let w = end - start;
                acc(*a, &|s| {
                    for r in 0..out.rows() {
                        add_into(&mut s[r * c + start..r * c + end], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::Mix(a, map) => {
                let c = self.v(*a).cols();
                acc(*a, &|s| map.apply_transpose_into(g, c, s));
            }
            Op::Softmax(a) => {
                let c = out.cols();
                acc(*a, &|s| {
                    for r in 0..out.rows() {
                        let y = &out.data()[r * c..(r + 1) * c];
                        let d = &g[r * c..(r + 1) * c];
                        let dot: f64 = y.iter().zip(d).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            s[r * c + j] += y[j] * (d[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                acc(*a, &|s| {
                    for r in 0..out.rows() {
                        let y = &out.data()[r * c..(r + 1) * c];
                        let d = &g[r * c..(r + 1) * c];
                        let total: f64 = d.iter().sum();
                        for j in 0..c {
                            s[r * c + j] += d[j] - y[j].exp() * total;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                acc(*a, &|s| s.iter_mut().zip(g).zip(out.data()).for_each(|((x, d), y)| *x += d * y * (1.0 - y)));
            }
            Op::Relu(a) => {
                let ta = self.v(*a).data();
                acc(*a, &|s| {
                    s.iter_mut().zip(g).zip(ta).for_each(|((x, d), v)| {
                        if *v > 0.0 {
                            *x += d
                        }
                    })
                });
            }
            Op::Softplus(a) => {
                let ta = self.v(*a).data();
                acc(*a, &|s| s.iter_mut().zip(g).zip(ta).for_each(|((x, d), v)| *x += d * kernels::sigmoid(*v)));
            }
            Op::LayerNorm(a, inv_std) => {
                let c = out.cols();
                acc(*a, &|s| {
                    for r in 0..out.rows() {
                        let y = &out.data()[r * c..(r + 1) * c];
                        let d = &g[r * c..(r + 1) * c];
                        let md = d.iter().sum::<f64>() / c as f64;
                        let mdy = d.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            s[r * c + j] += inv_std[r] * (d[j] - md - y[j] * mdy);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.v(*a).len().max(1) as f64;
                acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::SumCols(a) => {
                let c = self.v(*a).cols();
                acc(*a, &|s| {
                    for (r, row) in s.chunks_mut(c.max(1)).enumerate() {
                        row.iter_mut().for_each(|x| *x += g[r]);
                    }
                });
            }
            Op::SumRows(a) => {
                let c = self.v(*a).cols();
                acc(*a, &|s| {
                    for row in s.chunks_mut(c.max(1)) {
                        add_into(row, g);
                    }
                });
            }
            Op::Sin(a) => {
                let ta = self.v(*a).data();
                acc(*a, &|s| s.iter_mut().zip(g).zip(ta).for_each(|((x, d), v)| *x += d * v.cos()));
            }
            Op::Cos(a) => {
                let ta = self.v(*a).data();
                acc(*a, &|s| s.iter_mut().zip(g).zip(ta).for_each(|((x, d), v)| *x -= d * v.sin()));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
