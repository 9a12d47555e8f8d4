//! Expert routing: softmax top-k gating and task-aware dynamic gating.
//!
//! Dynamic gating scores a token against every expert column by cosine
//! similarity, mixes in the historical activation rate of the token's task
//! type, and activates expert `e` iff
//!
//! ```text
//! σ((s_e + α·a_e) / (1 + α)) − σ(G_e) > 0
//! ```
//!
//! The binary decision is a straight-through sign, so gradients reach both
//! the expert columns (through `s`) and the thresholds `G`. Active experts are
//! mixed with their normalised sigmoid scores; a token with no active
//! expert is *unrouted* and the layer contributes nothing for it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_codec::TaskType;
use crate::lifecycle::RoutingRecord;
use crate::numerics::{cosine_matrix, gelu, sigmoid, softmax_rows, Binder, Graph, Matrix, NodeId, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    TopK(usize),
    Dynamic,
}

/// How a task's activation history enters the dynamic gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRateMode {
    /// One rate per expert (a row of the task × expert matrix).
    #[default]
    PerExpert,
    /// The row mean, broadcast to every expert.
    Scalar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatingParams {
    /// Expert representation columns, d×K.
    pub w_g: Param,
    /// Learnable thresholds, 1×K.
    pub thresholds: Param,
    pub alpha: f64,
    pub mode: GateMode,
    pub task_rates: TaskRateMode,
}

impl GatingParams {
    /// Random unit-norm columns and zero thresholds.
    pub fn new<R: Rng + ?Sized>(d: usize, k: usize, mode: GateMode, alpha: f64, rng: &mut R) -> Self {
        let mut w = Matrix::randn(d, k, 1.0, rng);
        normalize_columns(&mut w);
        GatingParams {
            w_g: Param::new(w),
            thresholds: Param::new(Matrix::zeros(1, k)),
            alpha,
            mode,
            task_rates: TaskRateMode::PerExpert,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.w_g.value.cols()
    }

    pub fn dim(&self) -> usize {
        self.w_g.value.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_experts();
        if k == 0 {
            return Err(Error::Config("gating needs at least one expert".into()));
        }
        if self.thresholds.value.shape() != (1, k) {
            return Err(Error::Config("threshold vector length differs from K".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha {} must be >= 0", self.alpha)));
        }
        if let GateMode::TopK(top) = self.mode {
            if top == 0 || top > k {
                return Err(Error::Config(format!("top-k {top} outside 1..={k}")));
            }
        }
        Ok(())
    }

    /// Rescales every expert column to unit L2 norm (dynamic mode keeps
    /// cosine geometry this way).
    pub fn renormalize(&mut self) {
        normalize_columns(&mut self.w_g.value);
    }

    fn rates_for(&self, record: &RoutingRecord, tag: TaskType) -> Vec<f64> {
        let row = record.task_rates(tag);
        match self.task_rates {
            TaskRateMode::PerExpert => row.to_vec(),
            TaskRateMode::Scalar => {
                let mean = if row.is_empty() {
                    0.0
                } else {
                    row.iter().sum::<f64>() / row.len() as f64
                };
                vec![mean; row.len()]
            }
        }
    }
}

pub fn normalize_columns(w: &mut Matrix) {
    for c in 0..w.cols() {
        let n = w.column(c).iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            for r in 0..w.rows() {
                let v = w.get(r, c) / n;
                w.set(r, c, v);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// Active expert indices, ascending.
    pub active: Vec<usize>,
    /// Mixing weight per entry of `active`.
    pub weights: Vec<f64>,
    /// Softmax probabilities (top-k) or cosine scores (dynamic), length K.
    pub scores: Vec<f64>,
    pub unrouted: bool,
}

/// Two-layer feed-forward expert with a GELU hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl Expert {
    pub fn new<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Self {
        Expert {
            w1: Param::new(Matrix::randn(d, hidden, (1.0 / d as f64).sqrt(), rng)),
            b1: Param::new(Matrix::zeros(1, hidden)),
            w2: Param::new(Matrix::randn(hidden, d, (1.0 / hidden as f64).sqrt() * 0.5, rng)),
            b2: Param::new(Matrix::zeros(1, d)),
        }
    }

    pub fn params(&self) -> [&Param; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Copy with i.i.d. Gaussian noise added to every parameter and fresh
    /// optimizer moments.
    pub fn perturbed<R: Rng + ?Sized>(&self, std: f64, rng: &mut R) -> Self {
        let noisy = |p: &Param, rng: &mut R| {
            let (r, c) = p.shape();
            let noise = Matrix::randn(r, c, std, rng);
            Param::new(p.value.zip_map(&noise, |a, b| a + b))
        };
        Expert {
            w1: noisy(&self.w1, rng),
            b1: noisy(&self.b1, rng),
            w2: noisy(&self.w2, rng),
            b2: noisy(&self.b2, rng),
        }
    }

    /// Plain forward over the rows of `x`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.matmul(&self.w1.value)?;
        add_row_inplace(&mut h, &self.b1.value);
        let h = h.map(gelu);
        let mut o = h.matmul(&self.w2.value)?;
        add_row_inplace(&mut o, &self.b2.value);
        Ok(o)
    }

    pub fn forward_graph(&self, g: &mut Graph, binder: &mut Binder, x: NodeId, trainable: bool) -> Result<NodeId> {
        let w1 = binder.bind(g, &self.w1, trainable);
        let b1 = binder.bind(g, &self.b1, trainable);
        let w2 = binder.bind(g, &self.w2, trainable);
        let b2 = binder.bind(g, &self.b2, trainable);
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let o = g.matmul(h, w2)?;
        g.add_row(o, b2)
    }
}

fn add_row_inplace(m: &mut Matrix, row: &Matrix) {
    for r in 0..m.rows() {
        for (x, y) in m.row_mut(r).iter_mut().zip(row.data()) {
            *x += y;
        }
    }
}

/// Cosine similarity of one token with every expert column.
pub fn cosine_scores(x: &[f64], params: &GatingParams) -> Result<Vec<f64>> {
    let row = Matrix::row_vector(x);
    Ok(cosine_matrix(&row, &params.w_g.value)?.into_data())
}

fn check_token(x: &[f64], params: &GatingParams) -> Result<()> {
    if x.len() != params.dim() {
        return Err(Error::Dimension {
            op: "gate",
            lhs: (1, x.len()),
            rhs: params.w_g.shape(),
        });
    }
    Ok(())
}

/// Indices of the `k` largest entries, ties to the lower index, ascending.
fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut top: Vec<usize> = order.into_iter().take(k).collect();
    top.sort_unstable();
    top
}

/// Softmax gate keeping the `k` most probable experts, renormalised.
pub fn vanilla_topk_gate(x: &[f64], params: &GatingParams, k: usize) -> Result<RoutingDecision> {
    check_token(x, params)?;
    let kk = params.num_experts();
    if k == 0 || k > kk {
        return Err(Error::contract(format!("top-k {k} outside 1..={kk}")));
    }
    let logits = Matrix::row_vector(x).matmul(&params.w_g.value)?;
    let probs = softmax_rows(&logits).into_data();
    let active = top_k_indices(&probs, k);
    let total: f64 = (0..kk).filter(|e| active.contains(e)).map(|e| probs[e]).sum();
    let weights = active.iter().map(|&e| probs[e] / total).collect();
    Ok(RoutingDecision {
        active,
        weights,
        scores: probs,
        unrouted: false,
    })
}

/// Task-weighted threshold gate; `task_rates` has one entry per expert.
pub fn dynamic_gate(x: &[f64], task_rates: &[f64], params: &GatingParams) -> Result<RoutingDecision> {
    check_token(x, params)?;
    let k = params.num_experts();
    if task_rates.len() != k {
        return Err(Error::contract(format!("{} task rates for {k} experts", task_rates.len())));
    }
    let scores = cosine_scores(x, params)?;
    let alpha = params.alpha;
    let inv = 1.0 / (1.0 + alpha);
    let q: Vec<f64> = scores
        .iter()
        .zip(task_rates)
        .map(|(s, a)| sigmoid((s + a * alpha) * inv))
        .collect();
    let thresholds = params.thresholds.value.data();
    let mask: Vec<f64> = (0..k)
        .map(|e| if q[e] + (-sigmoid(thresholds[e])) > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let active: Vec<usize> = (0..k).filter(|&e| mask[e] > 0.0).collect();
    let total: f64 = (0..k).map(|e| mask[e] * q[e]).sum();
    let weights = active.iter().map(|&e| q[e] / total).collect();
    Ok(RoutingDecision {
        unrouted: active.is_empty(),
        active,
        weights,
        scores,
    })
}

/// Routes every row of `x` according to the gate mode.
pub fn route_tokens(
    x: &Matrix,
    tags: &[TaskType],
    params: &GatingParams,
    record: &RoutingRecord,
) -> Result<Vec<RoutingDecision>> {
    if tags.len() != x.rows() {
        return Err(Error::contract(format!("{} tags for {} tokens", tags.len(), x.rows())));
    }
    (0..x.rows())
        .map(|i| match params.mode {
            GateMode::TopK(k) => vanilla_topk_gate(x.row(i), params, k),
            GateMode::Dynamic => dynamic_gate(x.row(i), &params.rates_for(record, tags[i]), params),
        })
        .collect()
}

fn check_layer(experts: &[Expert], params: &GatingParams, record: &RoutingRecord) -> Result<()> {
    if experts.is_empty() || params.num_experts() == 0 {
        return Err(Error::Config("MoE layer needs at least one expert".into()));
    }
    if experts.len() != params.num_experts() || record.num_experts() != experts.len() {
        return Err(Error::Config(format!(
            "expert count mismatch: {} experts, {} gating columns, {} record columns",
            experts.len(),
            params.num_experts(),
            record.num_experts()
        )));
    }
    Ok(())
}

/// Plain (non-differentiable) MoE layer forward.
pub fn moe_forward(
    x: &Matrix,
    tags: &[TaskType],
    experts: &[Expert],
    params: &GatingParams,
    record: &RoutingRecord,
) -> Result<(Matrix, Vec<RoutingDecision>)> {
    check_layer(experts, params, record)?;
    let decisions = route_tokens(x, tags, params, record)?;
    let mut y = Matrix::zeros(x.rows(), x.cols());
    for (e, expert) in experts.iter().enumerate() {
        let mut rows = Vec::new();
        let mut weights = Vec::new();
        for (i, d) in decisions.iter().enumerate() {
            if let Some(pos) = d.active.iter().position(|&a| a == e) {
                rows.push(i);
                weights.push(d.weights[pos]);
            }
        }
        if rows.is_empty() {
            continue;
        }
        let out = expert.forward(&x.select_rows(&rows))?;
        for (k, (&i, w)) in rows.iter().zip(&weights).enumerate() {
            for (yv, ov) in y.row_mut(i).iter_mut().zip(out.row(k)) {
                *yv += ov * w;
            }
        }
    }
    Ok((y, decisions))
}

/// Which parameter groups of a layer receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerTrainable {
    pub gating: bool,
    pub experts: bool,
}

pub struct MoeGraphOutput {
    pub y: NodeId,
    pub decisions: Vec<RoutingDecision>,
    /// Differentiable per-expert assignment mass of TIME/SCORE tokens (1×K);
    /// `None` when the batch has no such tokens.
    pub soft_mass: Option<NodeId>,
    pub w_g: NodeId,
}

/// Differentiable MoE forward; produces the same values as [`moe_forward`].
#[allow(clippy::too_many_arguments)]
pub fn moe_forward_graph(
    g: &mut Graph,
    binder: &mut Binder,
    x: NodeId,
    tags: &[TaskType],
    experts: &[Expert],
    params: &GatingParams,
    record: &RoutingRecord,
    trainable: LayerTrainable,
) -> Result<MoeGraphOutput> {
    check_layer(experts, params, record)?;
    let (n, d) = g.shape(x);
    if tags.len() != n {
        return Err(Error::contract(format!("{} tags for {n} tokens", tags.len())));
    }
    let k = params.num_experts();
    let w_g = binder.bind(g, &params.w_g, trainable.gating);

    let (mix, assign, scores, gate) = match params.mode {
        GateMode::TopK(top) => {
            if top == 0 || top > k {
                return Err(Error::contract(format!("top-k {top} outside 1..={k}")));
            }
            let logits = g.matmul(x, w_g)?;
            let probs = g.softmax_rows(logits);
            let pv = g.value(probs).clone();
            let mut mask = Matrix::zeros(n, k);
            for i in 0..n {
                for e in top_k_indices(pv.row(i), top) {
                    mask.set(i, e, 1.0);
                }
            }
            let mask = g.constant(mask);
            let kept = g.mul(probs, mask)?;
            (g.normalize_row_sum(kept), probs, pv, None)
        }
        GateMode::Dynamic => {
            let s = g.cosine(x, w_g)?;
            let mut rates = Matrix::zeros(n, k);
            for (i, &t) in tags.iter().enumerate() {
                rates.row_mut(i).copy_from_slice(&params.rates_for(record, t));
            }
            let rates = g.constant(rates);
            let weighted = g.scale(rates, params.alpha);
            let z = g.add(s, weighted)?;
            let z = g.scale(z, 1.0 / (1.0 + params.alpha));
            let q = g.sigmoid(z);
            let th = binder.bind(g, &params.thresholds, trainable.gating);
            let sth = g.sigmoid(th);
            let neg = g.scale(sth, -1.0);
            let p = g.add_row(q, neg)?;
            let gate = g.ste_sign(p)?;
            let gated = g.mul(gate, q)?;
            (g.normalize_row_sum(gated), q, g.value(s).clone(), Some(gate))
        }
    };

    // Top-k: the mask leaves a positive weight exactly on kept experts.
    // Dynamic: hard gates are 0/1; under STE replay they sit within a small
    // perturbation of those values.
    let gate_values = g.value(mix).clone();
    let hard: Vec<Vec<usize>> = match gate {
        None => (0..n)
            .map(|i| (0..k).filter(|&e| gate_values.get(i, e) > 0.0).collect())
            .collect(),
        Some(gate) => {
            let mask = g.value(gate);
            (0..n)
                .map(|i| (0..k).filter(|&e| mask.get(i, e) > 0.5).collect())
                .collect()
        }
    };

    // A trainable dynamic gate needs every expert's output: the gradient of
    // a closed gate depends on what its expert would have contributed. The
    // zero gate keeps forward values equal to the sparse sum.
    let dense = gate.is_some() && trainable.gating;
    let mut y: Option<NodeId> = None;
    for (e, expert) in experts.iter().enumerate() {
        let col = g.slice_cols(mix, e, 1)?;
        if dense {
            let out = expert.forward_graph(g, binder, x, trainable.experts)?;
            let placed = g.mul_col(out, col)?;
            y = Some(match y {
                None => placed,
                Some(acc) => g.add(acc, placed)?,
            });
            continue;
        }
        let rows: Vec<usize> = (0..n).filter(|&i| hard[i].contains(&e)).collect();
        if rows.is_empty() {
            continue;
        }
        let xe = g.gather_rows(x, rows.clone())?;
        let out = expert.forward_graph(g, binder, xe, trainable.experts)?;
        let we = g.gather_rows(col, rows.clone())?;
        let weighted = g.mul_col(out, we)?;
        let placed = g.scatter_rows(weighted, rows, n)?;
        y = Some(match y {
            None => placed,
            Some(acc) => g.add(acc, placed)?,
        });
    }
    let y = match y {
        Some(y) => y,
        None => g.constant(Matrix::zeros(n, d)),
    };

    let decisions = (0..n)
        .map(|i| {
            let active = hard[i].clone();
            let weights = active.iter().map(|&e| gate_values.get(i, e)).collect();
            RoutingDecision {
                unrouted: active.is_empty(),
                active,
                weights,
                scores: scores.row(i).to_vec(),
            }
        })
        .collect();

    let task_rows: Vec<usize> = (0..n).filter(|&i| tags[i].is_task_token()).collect();
    let soft_mass = if task_rows.is_empty() {
        None
    } else {
        let picked = g.gather_rows(assign, task_rows)?;
        Some(g.col_sum(picked))
    };
    Ok(MoeGraphOutput {
        y,
        decisions,
        soft_mass,
        w_g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifecycle::RoutingRecord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params_from(w: Matrix, thresholds: &[f64], alpha: f64, mode: GateMode) -> GatingParams {
        GatingParams {
            w_g: Param::new(w),
            thresholds: Param::new(Matrix::row_vector(thresholds)),
            alpha,
            mode,
            task_rates: TaskRateMode::PerExpert,
        }
    }

    #[test]
    fn cosine_colinear_and_orthogonal() {
        let w = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let p = params_from(w, &[0.0, 0.0], 0.0, GateMode::Dynamic);
        let s = cosine_scores(&[5.0, 0.0], &p).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15);
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn cosine_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Matrix::uniform(8, 4, -1.0, 1.0, &mut rng);
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = params_from(w.clone(), &[0.0; 4], 0.0, GateMode::Dynamic);
        let s = cosine_scores(&x, &p).unwrap();
        for e in 0..4 {
            let col = w.column(e);
            let dot: f64 = x.iter().zip(&col).map(|(a, b)| a * b).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nw = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((s[e] - dot / (nx * nw)).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_example_weights() {
        // logits [2, 1, 0] via identity columns
        let p = params_from(Matrix::identity(3), &[0.0; 3], 0.0, GateMode::TopK(2));
        let d = vanilla_topk_gate(&[2.0, 1.0, 0.0], &p, 2).unwrap();
        assert_eq!(d.active, vec![0, 1]);
        assert!((d.weights[0] - 0.731_058_578_630_004_9).abs() < 1e-4);
        assert!((d.weights[1] - 0.268_941_421_369_995_1).abs() < 1e-4);
        let full = vanilla_topk_gate(&[2.0, 1.0, 0.0], &p, 3).unwrap();
        for (w, s) in full.weights.iter().zip(&full.scores) {
            assert!((w - s).abs() < 1e-15);
        }
        let dom = vanilla_topk_gate(&[900.0, 0.0, 0.0], &p, 1).unwrap();
        assert_eq!(dom.weights, vec![1.0]);
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let p = params_from(Matrix::identity(3), &[0.0; 3], 0.0, GateMode::TopK(1));
        let d = vanilla_topk_gate(&[1.0, 1.0, 1.0], &p, 1).unwrap();
        assert_eq!(d.active, vec![0]);
    }

    #[test]
    fn dynamic_task_weighting_example() {
        // one expert along x; token at angle with cos 0.2
        let w = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let x = [0.2, (1.0f64 - 0.04).sqrt()];
        let p = params_from(w.clone(), &[0.5], 1.0, GateMode::Dynamic);
        assert_eq!(dynamic_gate(&x, &[0.9], &p).unwrap().active, vec![0]);
        let p0 = params_from(w, &[0.5], 0.0, GateMode::Dynamic);
        assert!(dynamic_gate(&x, &[0.9], &p0).unwrap().unrouted);
    }

    #[test]
    fn zero_experts_is_configuration_error() {
        let p = params_from(Matrix::zeros(2, 0), &[], 0.0, GateMode::Dynamic);
        let record = RoutingRecord::new(0, 2);
        let err = moe_forward(&Matrix::filled(1, 2, 1.0), &[TaskType::Text], &[], &p, &record).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn single_active_expert_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let expert = Expert::new(3, 5, &mut rng);
        let p = params_from(Matrix::identity(3).select_rows(&[0, 1, 2]).remove_columns(&[1, 2]), &[-5.0], 0.0, GateMode::Dynamic);
        let x = Matrix::from_rows(&[vec![1.0, 0.5, -0.2]]).unwrap();
        let record = RoutingRecord::new(1, 3);
        let (y, dec) = moe_forward(&x, &[TaskType::Time], std::slice::from_ref(&expert), &p, &record).unwrap();
        assert_eq!(dec[0].weights, vec![1.0]);
        assert_eq!(y, expert.forward(&x).unwrap());
    }

    #[test]
    fn unrouted_token_yields_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let expert = Expert::new(2, 4, &mut rng);
        let p = params_from(Matrix::column_vector(&[1.0, 0.0]), &[5.0], 0.0, GateMode::Dynamic);
        let record = RoutingRecord::new(1, 2);
        let x = Matrix::from_rows(&[vec![0.3, 0.4]]).unwrap();
        let (y, dec) = moe_forward(&x, &[TaskType::Text], &[expert], &p, &record).unwrap();
        assert!(dec[0].unrouted);
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    fn naive_layer(x: &Matrix, experts: &[Expert], p: &GatingParams, k: usize) -> Matrix {
        let mut y = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let row = Matrix::row_vector(x.row(i));
            let logits: Vec<f64> = (0..p.num_experts())
                .map(|e| x.row(i).iter().zip(p.w_g.value.column(e)).map(|(a, b)| a * b).sum())
                .collect();
            let max = logits.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let probs: Vec<f64> = exps.iter().map(|v| v / z).collect();
            let mut order: Vec<usize> = (0..probs.len()).collect();
            order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
            let top = &order[..k];
            let norm: f64 = top.iter().map(|&e| probs[e]).sum();
            for &e in top {
                let out = experts[e].forward(&row).unwrap();
                for c in 0..x.cols() {
                    let v = y.get(i, c) + probs[e] / norm * out.get(0, c);
                    y.set(i, c, v);
                }
            }
        }
        y
    }

    #[test]
    fn topk_layer_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let experts: Vec<Expert> = (0..3).map(|_| Expert::new(4, 6, &mut rng)).collect();
        let p = GatingParams::new(4, 3, GateMode::TopK(2), 0.0, &mut rng);
        let x = Matrix::uniform(6, 4, -2.0, 2.0, &mut rng);
        let record = RoutingRecord::new(3, 4);
        let (y, dec) = moe_forward(&x, &[TaskType::Text; 6], &experts, &p, &record).unwrap();
        assert!(y.max_abs_diff(&naive_layer(&x, &experts, &p, 2)) < 1e-12);
        assert!(dec.iter().all(|d| d.active.len() == 2));
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let experts: Vec<Expert> = (0..4).map(|_| Expert::new(5, 7, &mut rng)).collect();
        let x = Matrix::uniform(9, 5, -2.0, 2.0, &mut rng);
        let tags = [
            TaskType::Time,
            TaskType::Score,
            TaskType::Text,
            TaskType::Sync,
            TaskType::Time,
            TaskType::Visual,
            TaskType::Text,
            TaskType::Eos,
            TaskType::Sep,
        ];
        let mut record = RoutingRecord::new(4, 5);
        for t in TaskType::ALL {
            for e in 0..4 {
                record.a.set(t.index(), e, rng.gen_range(0.0..1.0));
            }
        }
        for mode in [GateMode::TopK(2), GateMode::Dynamic] {
            let mut p = GatingParams::new(5, 4, mode, 0.7, &mut rng);
            p.thresholds.value = Matrix::uniform(1, 4, -0.5, 0.5, &mut rng);
            let (y, dec) = moe_forward(&x, &tags, &experts, &p, &record).unwrap();
            let mut g = Graph::new();
            let mut b = Binder::new();
            let xi = g.constant(x.clone());
            let train = LayerTrainable { gating: true, experts: true };
            let out = moe_forward_graph(&mut g, &mut b, xi, &tags, &experts, &p, &record, train).unwrap();
            assert!(g.value(out.y).max_abs_diff(&y) < 1e-12, "{mode:?}");
            for (a, b) in out.decisions.iter().zip(&dec) {
                assert_eq!(a.active, b.active);
                for (wa, wb) in a.weights.iter().zip(&b.weights) {
                    assert!((wa - wb).abs() < 1e-12);
                }
            }
            assert!(out.soft_mass.is_some());
        }
    }
}
