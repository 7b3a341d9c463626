//! Dense-tensor substrate with reverse-mode differentiation.
//!
//! All values are 64-bit floats in row-major order. A [`Tape`] records the
//! forward computation as a flat arena of [`TensorNode`]s; [`Tape::backward`]
//! walks the arena in reverse and accumulates gradients. The tape is rebuilt
//! on every forward pass; node values are immutable once created.

mod gradcheck;
mod params;
pub mod rng;

pub use gradcheck::{grad_check, GradCheckReport, TensorCheck};
pub use params::{ParamBinding, ParamSet};

use crate::error::{Error, Result};

/// Most-negative finite float, used as the additive masking value so that
/// masked attention scores never produce NaN through -inf arithmetic.
pub const MASK_VALUE: f64 = f64::MIN;

/// Plain dense matrix (no gradient) used for parameters and oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape/product mismatch");
        Tensor { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }
}

/// Handle into a [`Tape`].
pub type NodeId = usize;

/// Producing operation of a tape node; the variant name is the op-tag
/// reported by non-finite propagation errors.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul { a: NodeId, b: NodeId },
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Hadamard { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddRow { m: NodeId, row: NodeId },
    ScalarMul { s: NodeId, m: NodeId },
    Recip { a: NodeId },
    Softplus { a: NodeId },
    Sigmoid { a: NodeId },
    Silu { a: NodeId },
    SoftmaxRows { a: NodeId },
    LogSoftmaxRows { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    MeanRows { a: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    GatherRows { a: NodeId, rows: Vec<usize> },
    GatherPerRow { a: NodeId, cols: Vec<usize> },
    StackRows { parts: Vec<NodeId> },
    MaskCols { a: NodeId, masked: Vec<bool> },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::MatMul { .. } => "matmul",
            Op::MatMulNT { .. } => "matmul_nt",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Hadamard { .. } => "hadamard",
            Op::Scale { .. } => "scale",
            Op::AddRow { .. } => "add_row",
            Op::ScalarMul { .. } => "scalar_mul",
            Op::Recip { .. } => "recip",
            Op::Softplus { .. } => "softplus",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Silu { .. } => "silu",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LogSoftmaxRows { .. } => "log_softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MeanRows { .. } => "mean_rows",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
            Op::GatherRows { .. } => "gather_rows",
            Op::GatherPerRow { .. } => "gather_per_row",
            Op::StackRows { .. } => "stack_rows",
            Op::MaskCols { .. } => "mask_cols",
        }
    }
}

/// One recorded tensor in the forward graph.
#[derive(Debug, Clone)]
pub struct TensorNode {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    op: Op,
}

impl TensorNode {
    pub fn shape(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }

    pub fn op_tag(&self) -> &'static str {
        self.op.tag()
    }
}

/// Gradients produced by one backward pass, indexed by node id.
#[derive(Debug)]
pub struct Grads {
    by_node: Vec<Vec<f64>>,
}

impl Grads {
    pub fn of(&self, id: NodeId) -> &[f64] {
        &self.by_node[id]
    }
}

/// Flat arena of forward nodes; rebuilt per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<TensorNode>,
}

fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // out (m x n) = a (m x k) * b^T where b is (n x k)
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // out (k x n) = a^T * b where a is (m x k), b is (m x n)
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        (1.0 + x.exp()).ln()
    }
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &TensorNode {
        &self.nodes[id]
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].values.len(), 1);
        self.nodes[id].values[0]
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(rows * cols, values.len());
        self.nodes.push(TensorNode {
            rows,
            cols,
            values,
            op,
        });
        self.nodes.len() - 1
    }

    fn dim_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::Dim {
            op,
            left: self.nodes[a].shape(),
            right: self.nodes[b].shape(),
        }
    }

    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> NodeId {
        self.push(rows, cols, values, Op::Const)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.push(1, 1, vec![v], Op::Const)
    }

    /// Introduce a parameter tensor as a differentiable leaf.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.rows, t.cols, t.data.clone(), Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        mm_nn(&self.nodes[a].values, &self.nodes[b].values, m, k, n, &mut out);
        Ok(self.push(m, n, out, Op::MatMul { a, b }))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(self.dim_err("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        mm_nt(&self.nodes[a].values, &self.nodes[b].values, m, k, n, &mut out);
        Ok(self.push(m, n, out, Op::MatMulNT { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("add", a, b));
        }
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(r, c, out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("sub", a, b));
        }
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(r, c, out, Op::Sub { a, b }))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("hadamard", a, b));
        }
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(r, c, out, Op::Hadamard { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let (r, cc) = self.shape(a);
        let out: Vec<f64> = self.nodes[a].values.iter().map(|x| x * c).collect();
        self.push(r, cc, out, Op::Scale { a, c })
    }

    /// Broadcast-add a 1 x n row to every row of an m x n matrix.
    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(m);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != c {
            return Err(self.dim_err("add_row", m, row));
        }
        let mut out = self.nodes[m].values.clone();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += self.nodes[row].values[j];
            }
        }
        Ok(self.push(r, c, out, Op::AddRow { m, row }))
    }

    /// Multiply a matrix by a 1 x 1 scalar node.
    pub fn scalar_mul(&mut self, s: NodeId, m: NodeId) -> Result<NodeId> {
        if self.shape(s) != (1, 1) {
            return Err(self.dim_err("scalar_mul", s, m));
        }
        let sv = self.nodes[s].values[0];
        let (r, c) = self.shape(m);
        let out: Vec<f64> = self.nodes[m].values.iter().map(|x| sv * x).collect();
        Ok(self.push(r, c, out, Op::ScalarMul { s, m }))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.nodes[a].values.iter().map(|x| 1.0 / x).collect();
        self.push(r, c, out, Op::Recip { a })
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.nodes[a].values.iter().map(|&x| softplus(x)).collect();
        self.push(r, c, out, Op::Softplus { a })
    }

    pub fn sigmoid_node(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.nodes[a].values.iter().map(|&x| sigmoid(x)).collect();
        self.push(r, c, out, Op::Sigmoid { a })
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self
            .nodes[a]
            .values
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        self.push(r, c, out, Op::Silu { a })
    }

    /// Row-wise softmax with max-subtraction. A row whose every entry is the
    /// masking value (all keys masked) is an error rather than NaN.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[a].values[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max <= MASK_VALUE {
                return Err(Error::EmptyAttentionRow { row: i });
            }
            let mut sum = 0.0;
            for j in 0..c {
                let e = if row[j] <= MASK_VALUE {
                    0.0
                } else {
                    (row[j] - max).exp()
                };
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        Ok(self.push(r, c, out, Op::SoftmaxRows { a }))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[a].values[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max <= MASK_VALUE {
                return Err(Error::EmptyAttentionRow { row: i });
            }
            let lse = max
                + row
                    .iter()
                    .map(|&x| (x - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        Ok(self.push(r, c, out, Op::LogSoftmaxRows { a }))
    }

    /// Row-wise layer normalization with learnable gain and bias (1 x n each).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) {
            return Err(self.dim_err("layer_norm", x, gain));
        }
        if self.shape(bias) != (1, c) {
            return Err(self.dim_err("layer_norm", x, bias));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[x].values[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                let xhat = (row[j] - mean) * inv_std;
                out[i * c + j] = self.nodes[gain].values[j] * xhat + self.nodes[bias].values[j];
            }
        }
        Ok(self.push(r, c, out, Op::LayerNorm { x, gain, bias }))
    }

    /// Mean over rows: m x n -> 1 x n.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += self.nodes[a].values[i * c + j];
            }
        }
        for v in &mut out {
            *v /= r as f64;
        }
        self.push(1, c, out, Op::MeanRows { a })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].values.iter().sum();
        self.push(1, 1, vec![s], Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].values.len() as f64;
        let s: f64 = self.nodes[a].values.iter().sum::<f64>() / n;
        self.push(1, 1, vec![s], Op::MeanAll { a })
    }

    /// Select rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Validation(format!(
                "gather_rows index {bad} out of range for {r} rows"
            )));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&self.nodes[a].values[i * c..(i + 1) * c]);
        }
        Ok(self.push(rows.len(), c, out, Op::GatherRows { a, rows: rows.to_vec() }))
    }

    /// Pick one column per row: m x n -> m x 1.
    pub fn gather_per_row(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if cols.len() != r {
            return Err(Error::Validation(format!(
                "gather_per_row expects {r} indices, got {}",
                cols.len()
            )));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Validation(format!(
                "gather_per_row column {bad} out of range for {c} cols"
            )));
        }
        let out: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(i, &j)| self.nodes[a].values[i * c + j])
            .collect();
        Ok(self.push(r, 1, out, Op::GatherPerRow { a, cols: cols.to_vec() }))
    }

    /// Vertically concatenate matrices with equal column counts.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Validation("stack_rows of zero parts".into()));
        }
        let (_, c) = self.shape(parts[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(self.dim_err("stack_rows", parts[0], p));
            }
            rows += pr;
            out.extend_from_slice(&self.nodes[p].values);
        }
        Ok(self.push(rows, c, out, Op::StackRows { parts: parts.to_vec() }))
    }

    /// Replace every entry in masked columns with [`MASK_VALUE`] (pre-softmax
    /// key masking). Gradient does not flow through masked entries.
    pub fn mask_cols(&mut self, a: NodeId, masked: &[bool]) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if masked.len() != c {
            return Err(Error::Validation(format!(
                "mask_cols expects {c} flags, got {}",
                masked.len()
            )));
        }
        let mut out = self.nodes[a].values.clone();
        for i in 0..r {
            for j in 0..c {
                if masked[j] {
                    out[i * c + j] = MASK_VALUE;
                }
            }
        }
        Ok(self.push(r, c, out, Op::MaskCols { a, masked: masked.to_vec() }))
    }

    /// Earliest node holding a non-finite value, with its op-tag.
    pub fn find_non_finite(&self) -> Option<(NodeId, &'static str)> {
        for (id, node) in self.nodes.iter().enumerate() {
            if node.values.iter().any(|v| !v.is_finite()) {
                // Masked scores are finite by construction (MASK_VALUE), so
                // any non-finite value is a genuine propagation failure.
                return Some((id, node.op.tag()));
            }
        }
        None
    }

    /// Reverse-mode sweep from a scalar loss node. The loss's gradient with
    /// respect to itself is seeded at exactly 1.0.
    pub fn backward(&self, loss: NodeId) -> Result<Grads> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::Validation(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].shape()
            )));
        }
        if !self.nodes[loss].values[0].is_finite() {
            let (node, op_tag) = self
                .find_non_finite()
                .unwrap_or((loss, self.nodes[loss].op.tag()));
            return Err(Error::NonFinite { op_tag, node });
        }

        let mut g: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.values.len()])
            .collect();
        g[loss][0] = 1.0;

        for id in (0..=loss).rev() {
            let grad = std::mem::take(&mut g[id]);
            if grad.iter().all(|&v| v == 0.0) {
                g[id] = grad;
                continue;
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf | Op::Const => {}
                Op::MatMul { a, b } => {
                    let (m, k) = self.shape(*a);
                    let (_, n) = self.shape(*b);
                    // dA += G * B^T ; dB += A^T * G
                    {
                        let (ga, rest) = split_two(&mut g, *a, *b);
                        mm_nt(&grad, &self.nodes[*b].values, m, n, k, ga);
                        mm_tn(&self.nodes[*a].values, &grad, m, k, n, rest);
                    }
                }
                Op::MatMulNT { a, b } => {
                    let (m, k) = self.shape(*a);
                    let (n, _) = self.shape(*b);
                    // C = A * B^T : dA += G * B ; dB += G^T * A
                    {
                        let (ga, gb) = split_two(&mut g, *a, *b);
                        mm_nn(&grad, &self.nodes[*b].values, m, n, k, ga);
                        mm_tn(&grad, &self.nodes[*a].values, m, n, k, gb);
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut g[*a], &grad, 1.0);
                    accumulate(&mut g[*b], &grad, 1.0);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut g[*a], &grad, 1.0);
                    accumulate(&mut g[*b], &grad, -1.0);
                }
                Op::Hadamard { a, b } => {
                    for (i, &gv) in grad.iter().enumerate() {
                        g[*a][i] += gv * self.nodes[*b].values[i];
                    }
                    for (i, &gv) in grad.iter().enumerate() {
                        g[*b][i] += gv * self.nodes[*a].values[i];
                    }
                }
                Op::Scale { a, c } => accumulate(&mut g[*a], &grad, *c),
                Op::AddRow { m, row } => {
                    let (r, c) = self.shape(*m);
                    accumulate(&mut g[*m], &grad, 1.0);
                    for i in 0..r {
                        for j in 0..c {
                            g[*row][j] += grad[i * c + j];
                        }
                    }
                }
                Op::ScalarMul { s, m } => {
                    let sv = self.nodes[*s].values[0];
                    let mut ds = 0.0;
                    for (i, &gv) in grad.iter().enumerate() {
                        ds += gv * self.nodes[*m].values[i];
                        g[*m][i] += gv * sv;
                    }
                    g[*s][0] += ds;
                }
                Op::Recip { a } => {
                    for (i, &gv) in grad.iter().enumerate() {
                        let y = node.values[i];
                        g[*a][i] -= gv * y * y;
                    }
                }
                Op::Softplus { a } => {
                    for (i, &gv) in grad.iter().enumerate() {
                        g[*a][i] += gv * sigmoid(self.nodes[*a].values[i]);
                    }
                }
                Op::Sigmoid { a } => {
                    for (i, &gv) in grad.iter().enumerate() {
                        let y = node.values[i];
                        g[*a][i] += gv * y * (1.0 - y);
                    }
                }
                Op::Silu { a } => {
                    for (i, &gv) in grad.iter().enumerate() {
                        let x = self.nodes[*a].values[i];
                        let s = sigmoid(x);
                        g[*a][i] += gv * s * (1.0 + x * (1.0 - s));
                    }
                }
                Op::SoftmaxRows { a } => {
                    let (r, c) = self.shape(*a);
                    for i in 0..r {
                        let y = &node.values[i * c..(i + 1) * c];
                        let gr = &grad[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..c {
                            g[*a][i * c + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LogSoftmaxRows { a } => {
                    let (r, c) = self.shape(*a);
                    for i in 0..r {
                        let y = &node.values[i * c..(i + 1) * c];
                        let gr = &grad[i * c..(i + 1) * c];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..c {
                            g[*a][i * c + j] += gr[j] - y[j].exp() * gsum;
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (r, c) = self.shape(*x);
                    let cf = c as f64;
                    for i in 0..r {
                        let row = &self.nodes[*x].values[i * c..(i + 1) * c];
                        let mean = row.iter().sum::<f64>() / cf;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                        let inv_std = 1.0 / (var + LN_EPS).sqrt();
                        let gr = &grad[i * c..(i + 1) * c];
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv_std;
                            let gh = gr[j] * self.nodes[*gain].values[j];
                            mean_gh += gh;
                            mean_ghx += gh * xhat;
                            g[*gain][j] += gr[j] * xhat;
                            g[*bias][j] += gr[j];
                        }
                        mean_gh /= cf;
                        mean_ghx /= cf;
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv_std;
                            let gh = gr[j] * self.nodes[*gain].values[j];
                            g[*x][i * c + j] += inv_std * (gh - mean_gh - xhat * mean_ghx);
                        }
                    }
                }
                Op::MeanRows { a } => {
                    let (r, c) = self.shape(*a);
                    let inv = 1.0 / r as f64;
                    for i in 0..r {
                        for j in 0..c {
                            g[*a][i * c + j] += grad[j] * inv;
                        }
                    }
                }
                Op::SumAll { a } => {
                    accumulate_scalar(&mut g[*a], grad[0]);
                }
                Op::MeanAll { a } => {
                    let n = self.nodes[*a].values.len() as f64;
                    accumulate_scalar(&mut g[*a], grad[0] / n);
                }
                Op::GatherRows { a, rows } => {
                    let (_, c) = self.shape(*a);
                    for (i, &src) in rows.iter().enumerate() {
                        for j in 0..c {
                            g[*a][src * c + j] += grad[i * c + j];
                        }
                    }
                }
                Op::GatherPerRow { a, cols } => {
                    let (_, c) = self.shape(*a);
                    for (i, &col) in cols.iter().enumerate() {
                        g[*a][i * c + col] += grad[i];
                    }
                }
                Op::StackRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p].values.len();
                        for i in 0..len {
                            g[p][i] += grad[offset + i];
                        }
                        offset += len;
                    }
                }
                Op::MaskCols { a, masked } => {
                    let (r, c) = self.shape(*a);
                    for i in 0..r {
                        for j in 0..c {
                            if !masked[j] {
                                g[*a][i * c + j] += grad[i * c + j];
                            }
                        }
                    }
                }
            }
            g[id] = grad;
        }
        Ok(Grads { by_node: g })
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

fn accumulate_scalar(dst: &mut [f64], v: f64) {
    for d in dst.iter_mut() {
        *d += v;
    }
}

/// Two disjoint mutable gradient buffers out of the arena. MatMul backward
/// writes into both parents; when an op uses the same node twice the second
/// half is routed into a scratch buffer and merged.
fn split_two(g: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(a, b, "matmul with identical operands is not supported");
    if a < b {
        let (lo, hi) = g.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = g.split_at_mut(a);
        let (bslice, aslice) = (&mut lo[b], &mut hi[0]);
        (aslice, bslice)
    }
}
