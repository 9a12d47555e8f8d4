//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its value; [`Graph::backward`]
//! walks the nodes in reverse order and accumulates gradients into every
//! node that (transitively) depends on a leaf created with
//! [`Graph::param`]. Constants created with [`Graph::constant`] never
//! receive gradients, which keeps frozen parameters cheap.

use crate::error::{Error, Result};
use crate::numerics::matrix::{gemm, Matrix};

pub type NodeId = usize;

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    CausalSoftmax(NodeId),
    SteSign(NodeId),
    RmsNorm(NodeId),
    Cosine(NodeId, NodeId),
    NormalizeRowSum(NodeId),
    GatherRows(NodeId, Vec<usize>),
    ScatterRows(NodeId, Vec<usize>),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    ColSum(NodeId),
    Sum(NodeId),
    SumSquares(NodeId),
    CrossEntropySum(NodeId, Vec<Option<usize>>),
    LogSumExpSqSum(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// How `ste_sign` evaluates its forward pass.
///
/// `Record` behaves like `Standard` but keeps every pre-activation it sees.
/// `Replay` evaluates the straight-through surrogate
/// `sign(z₀) + (z − z₀)` against recorded anchors `z₀`: it has the same
/// value as the hard sign at the anchor and an identity Jacobian everywhere,
/// so finite differences of a replayed forward are the reference for the
/// straight-through gradient.
#[derive(Debug, Clone, Default)]
pub enum SteMode {
    #[default]
    Standard,
    Record(Vec<Matrix>),
    Replay { anchors: Vec<Matrix>, cursor: usize },
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    ste: SteMode,
}

/// Gradients produced by one backward pass, indexed by node id.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, id: NodeId, like: &Matrix) -> Matrix {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_row_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        softmax_row_into(x.row(r), out.row_mut(r));
    }
    out
}

/// Elementwise logistic function.
pub fn sigmoid_matrix(x: &Matrix) -> Matrix {
    x.map(sigmoid)
}

/// Hard forward of the straight-through sign: 1 where `z > 0`, else 0.
pub fn ste_sign_forward(z: &Matrix) -> Matrix {
    z.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

fn dim_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_ste_mode(ste: SteMode) -> Self {
        Self {
            nodes: Vec::new(),
            ste,
        }
    }

    /// Hands back the STE mode (and any recorded anchors).
    pub fn take_ste_mode(&mut self) -> SteMode {
        std::mem::take(&mut self.ste)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, op: Op, value: Matrix, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        self.nodes.len() - 1
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        self.nodes.len() - 1
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let value = va.matmul(vb)?;
        Ok(self.push(Op::MatMul(a, b), value, &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.cols() != vb.cols() {
            return Err(dim_err("matmul_nt", va, vb));
        }
        let mut value = Matrix::zeros(va.rows(), vb.rows());
        gemm(1.0, va, false, vb, true, 0.0, &mut value);
        Ok(self.push(Op::MatMulNT(a, b), value, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(dim_err(op, va, vb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let value = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), value, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let value = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), value, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let value = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), value, &[a, b]))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (&self.nodes[a].value, &self.nodes[row].value);
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(dim_err("add_row", va, vr));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(vr.data()) {
                *x += y;
            }
        }
        Ok(self.push(Op::AddRow(a, row), value, &[a, row]))
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (&self.nodes[a].value, &self.nodes[row].value);
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(dim_err("mul_row", va, vr));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(vr.data()) {
                *x *= y;
            }
        }
        Ok(self.push(Op::MulRow(a, row), value, &[a, row]))
    }

    /// Scales row `i` of `a` by `col[i]` for an `n×1` column.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (va, vc) = (&self.nodes[a].value, &self.nodes[col].value);
        if vc.cols() != 1 || vc.rows() != va.rows() {
            return Err(dim_err("mul_col", va, vc));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            let s = vc.get(r, 0);
            for x in value.row_mut(r) {
                *x *= s;
            }
        }
        Ok(self.push(Op::MulCol(a, col), value, &[a, col]))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.nodes[a].value.scale(s);
        self.push(Op::Scale(a, s), value, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = sigmoid_matrix(&self.nodes[a].value);
        self.push(Op::Sigmoid(a), value, &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(gelu);
        self.push(Op::Gelu(a), value, &[a])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = softmax_rows(&self.nodes[a].value);
        self.push(Op::SoftmaxRows(a), value, &[a])
    }

    /// Softmax over the lower triangle of a square score matrix; entries
    /// above the diagonal are exactly zero.
    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        if va.rows() != va.cols() {
            return Err(dim_err("causal_softmax", va, va));
        }
        let n = va.rows();
        let mut value = Matrix::zeros(n, n);
        for r in 0..n {
            softmax_row_into(&va.row(r)[..=r], &mut value.row_mut(r)[..=r]);
        }
        Ok(self.push(Op::CausalSoftmax(a), value, &[a]))
    }

    /// Binary sign with a straight-through backward.
    pub fn ste_sign(&mut self, z: NodeId) -> Result<NodeId> {
        let vz = &self.nodes[z].value;
        let value = match &mut self.ste {
            SteMode::Standard => ste_sign_forward(vz),
            SteMode::Record(anchors) => {
                anchors.push(vz.clone());
                ste_sign_forward(vz)
            }
            SteMode::Replay { anchors, cursor } => {
                let anchor = anchors.get(*cursor).ok_or_else(|| {
                    Error::contract("ste replay ran out of recorded anchors")
                })?;
                if anchor.shape() != vz.shape() {
                    return Err(dim_err("ste_sign replay", anchor, vz));
                }
                *cursor += 1;
                let hard = ste_sign_forward(anchor);
                Matrix::from_vec(
                    vz.rows(),
                    vz.cols(),
                    hard.data()
                        .iter()
                        .zip(vz.data().iter().zip(anchor.data()))
                        .map(|(h, (v, a))| h + (v - a))
                        .collect(),
                )?
            }
        };
        Ok(self.push(Op::SteSign(z), value, &[z]))
    }

    /// Row-wise RMS normalisation without gain.
    pub fn rms_norm(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let mut value = va.clone();
        let d = va.cols() as f64;
        for r in 0..va.rows() {
            let row = value.row_mut(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
        }
        self.push(Op::RmsNorm(a), value, &[a])
    }

    /// Cosine similarity of every row of `x` (n×d) with every column of `w`
    /// (d×K), giving n×K.
    pub fn cosine(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (vx, vw) = (&self.nodes[x].value, &self.nodes[w].value);
        let value = cosine_matrix(vx, vw)?;
        Ok(self.push(Op::Cosine(x, w), value, &[x, w]))
    }

    /// Divides each row by its sum; rows summing to zero stay zero.
    pub fn normalize_row_sum(&mut self, a: NodeId) -> NodeId {
        let mut value = self.nodes[a].value.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        self.push(Op::NormalizeRowSum(a), value, &[a])
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.rows()) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of range for {} rows",
                va.rows()
            )));
        }
        let value = va.select_rows(&idx);
        Ok(self.push(Op::GatherRows(a, idx), value, &[a]))
    }

    /// Places row `k` of `a` at row `idx[k]` of an `n`-row zero matrix
    /// (accumulating on duplicate indices).
    pub fn scatter_rows(&mut self, a: NodeId, idx: Vec<usize>, n: usize) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        if idx.len() != va.rows() || idx.iter().any(|&i| i >= n) {
            return Err(Error::contract("scatter_rows index set does not fit"));
        }
        let mut value = Matrix::zeros(n, va.cols());
        for (k, &i) in idx.iter().enumerate() {
            for (o, v) in value.row_mut(i).iter_mut().zip(va.row(k)) {
                *o += v;
            }
        }
        Ok(self.push(Op::ScatterRows(a, idx), value, &[a]))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        if start + len > va.cols() {
            return Err(Error::contract(format!(
                "slice_cols {start}..{} exceeds {} columns",
                start + len,
                va.cols()
            )));
        }
        let mut value = Matrix::zeros(va.rows(), len);
        for r in 0..va.rows() {
            value.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        Ok(self.push(Op::SliceCols(a, start), value, &[a]))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let rows = parts.first().map_or(0, |&p| self.nodes[p].value.rows());
        let mut cols = 0;
        for &p in &parts {
            let v = &self.nodes[p].value;
            if v.rows() != rows {
                return Err(dim_err("concat_cols", &self.nodes[parts[0]].value, v));
            }
            cols += v.cols();
        }
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in &parts {
                let v = &self.nodes[p].value;
                value.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
                off += v.cols();
            }
        }
        Ok(self.push(Op::ConcatCols(parts.clone()), value, &parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let cols = parts.first().map_or(0, |&p| self.nodes[p].value.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let v = &self.nodes[p].value;
            if v.cols() != cols {
                return Err(dim_err("concat_rows", &self.nodes[parts[0]].value, v));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.clone()), value, &parts))
    }

    /// Column sums as a `1×c` row.
    pub fn col_sum(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let mut value = Matrix::zeros(1, va.cols());
        for r in 0..va.rows() {
            for (o, v) in value.data_mut().iter_mut().zip(va.row(r)) {
                *o += v;
            }
        }
        self.push(Op::ColSum(a), value, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::scalar(self.nodes[a].value.sum());
        self.push(Op::Sum(a), value, &[a])
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::scalar(self.nodes[a].value.sum_squares());
        self.push(Op::SumSquares(a), value, &[a])
    }

    /// Σ over unmasked rows of `logsumexp(row) − row[target]`.
    pub fn cross_entropy_sum(&mut self, logits: NodeId, targets: Vec<Option<usize>>) -> Result<NodeId> {
        let vl = &self.nodes[logits].value;
        if targets.len() != vl.rows() {
            return Err(Error::contract(format!(
                "cross_entropy: {} targets for {} logit rows",
                targets.len(),
                vl.rows()
            )));
        }
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= vl.cols() {
                    return Err(Error::contract(format!(
                        "cross_entropy: target {t} outside vocabulary of {}",
                        vl.cols()
                    )));
                }
                let row = vl.row(r);
                total += log_sum_exp(row) - row[t];
            }
        }
        Ok(self.push(
            Op::CrossEntropySum(logits, targets),
            Matrix::scalar(total),
            &[logits],
        ))
    }

    /// Σ over rows of `logsumexp(row)²`.
    pub fn lse_sq_sum(&mut self, logits: NodeId) -> NodeId {
        let vl = &self.nodes[logits].value;
        let total = (0..vl.rows())
            .map(|r| log_sum_exp(vl.row(r)).powi(2))
            .sum::<f64>();
        self.push(Op::LogSumExpSqSum(logits), Matrix::scalar(total), &[logits])
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = &self.nodes[loss].value;
        if lv.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a 1x1 loss, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Matrix::scalar(1.0));
        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => g.axpy(1.0, &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn propagate(&self, id: NodeId, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.wants(*a) {
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    gemm(1.0, g, false, vb, true, 0.0, &mut da);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Matrix::zeros(vb.rows(), vb.cols());
                    gemm(1.0, va, true, g, false, 0.0, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.wants(*a) {
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    gemm(1.0, g, false, vb, false, 0.0, &mut da);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Matrix::zeros(vb.rows(), vb.cols());
                    gemm(1.0, g, true, va, false, 0.0, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(vb, |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(va, |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    self.accumulate(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let (va, vr) = (&self.nodes[*a].value, &self.nodes[*row].value);
                if self.wants(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        for (x, y) in da.row_mut(r).iter_mut().zip(vr.data()) {
                            *x *= y;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*row) {
                    self.accumulate(grads, *row, column_sums(&g.zip_map(va, |x, y| x * y)));
                }
            }
            Op::MulCol(a, col) => {
                let (va, vc) = (&self.nodes[*a].value, &self.nodes[*col].value);
                if self.wants(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        let s = vc.get(r, 0);
                        da.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*col) {
                    let mut dc = Matrix::zeros(vc.rows(), 1);
                    for r in 0..va.rows() {
                        let s: f64 = g.row(r).iter().zip(va.row(r)).map(|(x, y)| x * y).sum();
                        dc.set(r, 0, s);
                    }
                    self.accumulate(grads, *col, dc);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(out, |gv, y| gv * y * (1.0 - y)));
            }
            Op::Gelu(a) => {
                let va = &self.nodes[*a].value;
                self.accumulate(grads, *a, g.zip_map(va, |gv, x| gv * gelu_grad(x)));
            }
            Op::SoftmaxRows(a) | Op::CausalSoftmax(a) => {
                let mut da = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, (p, q)) in da.row_mut(r).iter_mut().zip(y.iter().zip(gr)) {
                        *o = p * (q - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SteSign(z) => self.accumulate(grads, *z, g.clone()),
            Op::RmsNorm(a) => {
                let va = &self.nodes[*a].value;
                let d = va.cols() as f64;
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let x = va.row(r);
                    let ms = x.iter().map(|v| v * v).sum::<f64>() / d;
                    let inv = 1.0 / (ms + RMS_EPS).sqrt();
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum::<f64>() / d;
                    for (o, (yy, gg)) in da.row_mut(r).iter_mut().zip(y.iter().zip(gr)) {
                        *o = (gg - yy * dot) * inv;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Cosine(x, w) => {
                let (vx, vw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (xh, xn) = unit_rows(vx);
                let (wh, wn) = unit_cols(vw);
                if self.wants(*x) {
                    // dX_i = (G_i · Whᵀ − (Σ_j G_ij s_ij) x̂_i) / |x_i|
                    let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                    gemm(1.0, g, false, &wh, true, 0.0, &mut dx);
                    for i in 0..vx.rows() {
                        let c: f64 = g.row(i).iter().zip(out.row(i)).map(|(p, q)| p * q).sum();
                        for (o, h) in dx.row_mut(i).iter_mut().zip(xh.row(i)) {
                            *o = (*o - c * h) / xn[i];
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    // dW_j = (X̂ᵀ G_j − (Σ_i G_ij s_ij) ŵ_j) / |w_j|
                    let mut dw = Matrix::zeros(vw.rows(), vw.cols());
                    gemm(1.0, &xh, true, g, false, 0.0, &mut dw);
                    let c = column_sums(&g.zip_map(out, |p, q| p * q));
                    for r in 0..vw.rows() {
                        for j in 0..vw.cols() {
                            let v = (dw.get(r, j) - c.get(0, j) * wh.get(r, j)) / wn[j];
                            dw.set(r, j, v);
                        }
                    }
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::NormalizeRowSum(a) => {
                let va = &self.nodes[*a].value;
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let s: f64 = va.row(r).iter().sum();
                    if s == 0.0 {
                        continue;
                    }
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, q) in da.row_mut(r).iter_mut().zip(gr) {
                        *o = (q - dot) / s;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::GatherRows(a, idx) => {
                let va = &self.nodes[*a].value;
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in da.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::ScatterRows(a, idx) => {
                self.accumulate(grads, *a, g.select_rows(idx));
            }
            Op::SliceCols(a, start) => {
                let va = &self.nodes[*a].value;
                let mut da = Matrix::zeros(va.rows(), va.cols());
                let len = out.cols();
                for r in 0..va.rows() {
                    da.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.nodes[p].value.cols();
                    if self.wants(p) {
                        let mut dp = Matrix::zeros(g.rows(), c);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.nodes[p].value.shape();
                    if self.wants(p) {
                        let dp = Matrix::from_vec(
                            rows,
                            cols,
                            g.data()[off * cols..(off + rows) * cols].to_vec(),
                        )
                        .expect("concat_rows slice");
                        self.accumulate(grads, p, dp);
                    }
                    off += rows;
                }
            }
            Op::ColSum(a) => {
                let va = &self.nodes[*a].value;
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    da.row_mut(r).copy_from_slice(g.data());
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let (r, c) = self.nodes[*a].value.shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::SumSquares(a) => {
                let s = 2.0 * g.get(0, 0);
                self.accumulate(grads, *a, self.nodes[*a].value.scale(s));
            }
            Op::CrossEntropySum(l, targets) => {
                let vl = &self.nodes[*l].value;
                let s = g.get(0, 0);
                let mut dl = Matrix::zeros(vl.rows(), vl.cols());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        softmax_row_into(vl.row(r), dl.row_mut(r));
                        dl.row_mut(r)[t] -= 1.0;
                        dl.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                }
                self.accumulate(grads, *l, dl);
            }
            Op::LogSumExpSqSum(l) => {
                let vl = &self.nodes[*l].value;
                let s = g.get(0, 0);
                let mut dl = Matrix::zeros(vl.rows(), vl.cols());
                for r in 0..vl.rows() {
                    let lse = log_sum_exp(vl.row(r));
                    softmax_row_into(vl.row(r), dl.row_mut(r));
                    dl.row_mut(r).iter_mut().for_each(|v| *v *= 2.0 * lse * s);
                }
                self.accumulate(grads, *l, dl);
            }
        }
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

fn unit_rows(m: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (out, norms)
}

fn unit_cols(m: &Matrix) -> (Matrix, Vec<f64>) {
    let mut norms = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (n, v) in norms.iter_mut().zip(m.row(r)) {
            *n += v * v;
        }
    }
    norms.iter_mut().for_each(|n| *n = n.sqrt());
    let mut out = m.clone();
    for r in 0..m.rows() {
        for (o, n) in out.row_mut(r).iter_mut().zip(&norms) {
            *o /= n;
        }
    }
    (out, norms)
}

/// Cosine similarity between rows of `x` and columns of `w`.
pub fn cosine_matrix(x: &Matrix, w: &Matrix) -> Result<Matrix> {
    if x.cols() != w.rows() {
        return Err(dim_err("cosine", x, w));
    }
    let (xh, xn) = unit_rows(x);
    let (wh, wn) = unit_cols(w);
    if let Some(i) = xn.iter().position(|&n| n == 0.0) {
        return Err(Error::Routing(format!("token {i} has zero norm")));
    }
    if let Some(j) = wn.iter().position(|&n| n == 0.0) {
        return Err(Error::Routing(format!("expert column {j} has zero norm")));
    }
    let mut out = Matrix::zeros(x.rows(), w.cols());
    gemm(1.0, &xh, false, &wh, false, 0.0, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        let num = a.zip_map(b, |x, y| x - y).frobenius_norm();
        let den = a.frobenius_norm().max(b.frobenius_norm()).max(1e-8);
        num / den
    }

    /// Builds `loss = Σ c ⊙ op(x)` for a fixed random `c`, then compares the
    /// autodiff gradient wrt `x` with central differences.
    fn check_unary(
        rows: usize,
        cols: usize,
        seed: u64,
        build: impl Fn(&mut Graph, NodeId) -> NodeId,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Matrix::uniform(rows, cols, -2.0, 2.0, &mut rng);
        let probe = {
            let mut g = Graph::new();
            let x = g.constant(x0.clone());
            let y = build(&mut g, x);
            g.value(y).shape()
        };
        let c = Matrix::uniform(probe.0, probe.1, -1.0, 1.0, &mut rng);
        let eval = |x: &Matrix| -> (f64, Option<Matrix>) {
            let mut g = Graph::new();
            let xi = g.param(x.clone());
            let y = build(&mut g, xi);
            let cc = g.constant(c.clone());
            let m = g.mul(y, cc).unwrap();
            let l = g.sum(m);
            let grads = g.backward(l).unwrap();
            (g.value(l).get(0, 0), grads.get(xi).cloned())
        };
        let (_, analytic) = eval(&x0);
        let numeric = finite_diff(|x| eval(x).0, &x0, 1e-3);
        rel_err(&analytic.unwrap(), &numeric)
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        let cases: Vec<(&str, Box<dyn Fn(&mut Graph, NodeId) -> NodeId>)> = vec![
            ("sigmoid", Box::new(|g, x| g.sigmoid(x))),
            ("gelu", Box::new(|g, x| g.gelu(x))),
            ("softmax", Box::new(|g, x| g.softmax_rows(x))),
            ("rms_norm", Box::new(|g, x| g.rms_norm(x))),
            ("scale", Box::new(|g, x| g.scale(x, -1.7))),
            ("normalize_row_sum", Box::new(|g, x| {
                let s = g.sigmoid(x);
                g.normalize_row_sum(s)
            })),
            ("gather", Box::new(|g, x| g.gather_rows(x, vec![2, 0, 2]).unwrap())),
            ("scatter", Box::new(|g, x| g.scatter_rows(x, vec![4, 1, 4], 6).unwrap())),
            ("slice", Box::new(|g, x| g.slice_cols(x, 1, 2).unwrap())),
            ("col_sum", Box::new(|g, x| g.col_sum(x))),
            ("sum_squares", Box::new(|g, x| g.sum_squares(x))),
            ("lse_sq", Box::new(|g, x| g.lse_sq_sum(x))),
            ("ce", Box::new(|g, x| g.cross_entropy_sum(x, vec![Some(1), None, Some(3)]).unwrap())),
            ("concat", Box::new(|g, x| {
                let s = g.sigmoid(x);
                let r = g.concat_rows(vec![x, s]).unwrap();
                let c = g.concat_cols(vec![x, s]).unwrap();
                let r2 = g.slice_cols(r, 0, 4).unwrap();
                let c2 = g.gather_rows(c, vec![0, 1, 2, 0, 1, 2]).unwrap();
                let c3 = g.slice_cols(c2, 2, 4).unwrap();
                g.mul(r2, c3).unwrap()
            })),
        ];
        for (i, (name, build)) in cases.into_iter().enumerate() {
            let err = check_unary(3, 4, 100 + i as u64, build);
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn causal_softmax_gradient() {
        let err = check_unary(5, 5, 9, |g, x| g.causal_softmax(x).unwrap());
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a0 = Matrix::uniform(3, 4, -2.0, 2.0, &mut rng);
        let b0 = Matrix::uniform(4, 5, -2.0, 2.0, &mut rng);
        let r0 = Matrix::uniform(1, 5, -2.0, 2.0, &mut rng);
        let col0 = Matrix::uniform(3, 1, -2.0, 2.0, &mut rng);
        let w0 = Matrix::uniform(4, 3, -2.0, 2.0, &mut rng);
        let f = |a: &Matrix, b: &Matrix, r: &Matrix, col: &Matrix, w: &Matrix| {
            let mut g = Graph::new();
            let ids = [
                g.param(a.clone()),
                g.param(b.clone()),
                g.param(r.clone()),
                g.param(col.clone()),
                g.param(w.clone()),
            ];
            let m = g.matmul(ids[0], ids[1]).unwrap();
            let m = g.add_row(m, ids[2]).unwrap();
            let m = g.mul_row(m, ids[2]).unwrap();
            let m = g.mul_col(m, ids[3]).unwrap();
            let nt = g.matmul_nt(m, m).unwrap();
            let cs = g.cosine(ids[0], ids[4]).unwrap();
            let t = g.matmul(nt, cs).unwrap();
            let t2 = g.sub(t, cs).unwrap();
            let t3 = g.add(t2, cs).unwrap();
            let sq = g.mul(t3, t3).unwrap();
            let l = g.sum(sq);
            let grads = g.backward(l).unwrap();
            let gs: Vec<Matrix> = ids.iter().map(|&i| grads.get(i).unwrap().clone()).collect();
            (g.value(l).get(0, 0), gs)
        };
        let (_, analytic) = f(&a0, &b0, &r0, &col0, &w0);
        let numeric = [
            finite_diff(|x| f(x, &b0, &r0, &col0, &w0).0, &a0, 1e-3),
            finite_diff(|x| f(&a0, x, &r0, &col0, &w0).0, &b0, 1e-3),
            finite_diff(|x| f(&a0, &b0, x, &col0, &w0).0, &r0, 1e-3),
            finite_diff(|x| f(&a0, &b0, &r0, x, &w0).0, &col0, 1e-3),
            finite_diff(|x| f(&a0, &b0, &r0, &col0, x).0, &w0, 1e-3),
        ];
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let e = rel_err(a, n);
            assert!(e < 1e-4, "input {i}: rel err {e}");
        }
    }

    #[test]
    fn softmax_values() {
        let s = softmax_rows(&Matrix::row_vector(&[0.0, 0.0, 0.0]));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = softmax_rows(&Matrix::row_vector(&[1.0, 2.0]));
        let b = softmax_rows(&Matrix::row_vector(&[0.0, 1.0]));
        assert!(a.max_abs_diff(&b) < 1e-15);
        // exp(2)/(e²+e+1), e/(…), 1/(…)
        let s = softmax_rows(&Matrix::row_vector(&[2.0, 1.0, 0.0]));
        let expected = [0.665_240_955_774_821_5, 0.244_728_471_054_797_6, 0.090_030_573_170_380_46];
        for (v, e) in s.data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-4);
        }
    }

    #[test]
    fn sigmoid_values() {
        let s = sigmoid_matrix(&Matrix::row_vector(&[0.0, 2.0, -2.0, 37.0, -800.0]));
        assert_eq!(s.get(0, 0), 0.5);
        assert!((s.get(0, 1) - 0.880_797_077_977_882_4).abs() < 1e-4);
        assert!((s.get(0, 1) + s.get(0, 2) - 1.0).abs() < 1e-15);
        assert!(s.get(0, 4) >= 0.0 && s.is_finite());
    }

    #[test]
    fn ste_sign_forward_and_backward() {
        let mut g = Graph::new();
        let z = g.param(Matrix::row_vector(&[0.3, -0.2, 0.0]));
        let s = g.ste_sign(z).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0, 0.0]);
        let c = g.constant(Matrix::row_vector(&[2.5, 2.5, 2.5]));
        let m = g.mul(s, c).unwrap();
        let l = g.sum(m);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(z).unwrap().data(), &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn ste_replay_matches_hard_sign_at_anchor() {
        let z0 = Matrix::row_vector(&[0.3, -0.2]);
        let mut g = Graph::with_ste_mode(SteMode::Record(Vec::new()));
        let z = g.constant(z0.clone());
        g.ste_sign(z).unwrap();
        let SteMode::Record(anchors) = g.take_ste_mode() else { panic!() };
        let mut r = Graph::with_ste_mode(SteMode::Replay { anchors, cursor: 0 });
        let z = r.constant(Matrix::row_vector(&[0.35, -0.1]));
        let s = r.ste_sign(z).unwrap();
        let v = r.value(s);
        assert!((v.get(0, 0) - 1.05).abs() < 1e-15);
        assert!((v.get(0, 1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn backward_contracts() {
        let mut g = Graph::new();
        let x = g.param(Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
        let h = g.sum_squares(x);
        let half = g.scale(h, 0.5);
        let grads = g.backward(half).unwrap();
        assert_eq!(grads.get(x).unwrap(), g.value(x));
        let again = g.backward(half).unwrap();
        assert_eq!(again.get(x), grads.get(x));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn two_layer_mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::uniform(4, 3, -2.0, 2.0, &mut rng);
        let w1 = Matrix::uniform(3, 5, -2.0, 2.0, &mut rng);
        let w2 = Matrix::uniform(5, 2, -2.0, 2.0, &mut rng);
        let loss = |w1: &Matrix, w2: &Matrix| {
            let mut g = Graph::new();
            let xi = g.constant(x.clone());
            let a = g.param(w1.clone());
            let b = g.param(w2.clone());
            let h = g.matmul(xi, a).unwrap();
            let h = g.gelu(h);
            let o = g.matmul(h, b).unwrap();
            let l = g.sum_squares(o);
            let grads = g.backward(l).unwrap();
            (
                g.value(l).get(0, 0),
                grads.get(a).unwrap().clone(),
                grads.get(b).unwrap().clone(),
            )
        };
        let (_, ga, gb) = loss(&w1, &w2);
        let na = finite_diff(|m| loss(m, &w2).0, &w1, 1e-3);
        let nb = finite_diff(|m| loss(&w1, m).0, &w2, 1e-3);
        assert!(rel_err(&ga, &na) < 1e-4);
        assert!(rel_err(&gb, &nb) < 1e-4);
    }

    #[test]
    fn cosine_zero_norm_is_routing_error() {
        let x = Matrix::zeros(1, 3);
        let w = Matrix::identity(3);
        assert!(matches!(cosine_matrix(&x, &w), Err(Error::Routing(_))));
    }
}
