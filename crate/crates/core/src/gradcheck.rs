//! Full-model finite-difference check of the analytic gradients.
//!
//! The reference differentiates the straight-through surrogate: gate
//! anchors are recorded once and replayed, so active sets stay fixed while
//! the gate passes perturbations through with unit slope.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{AuxTarget, LossWeights};
use crate::model::{FeedForward, GatingKind, Model, ModelConfig, ALL_GROUPS};
use crate::numerics::{finite_diff, Binder, Graph, Matrix, SteMode};
use crate::synthdata::{gen_split, SynthConfig, SyntheticSample};

/// Smallest |gate pre-activation| the check accepts.
pub const MIN_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Scale the analytic gradient of this parameter by 1.5 (negative
    /// control).
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            step: 1e-5,
            tolerance: 1e-3,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub group: String,
    /// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖).
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<ParamCheck>,
    pub tolerance: f64,
    /// Smallest |gate pre-activation| in the checked batch.
    pub min_margin: f64,
    /// Experts with both active and inactive tokens in the batch.
    pub mixed_experts: usize,
    pub seed: u64,
}

impl GradcheckReport {
    pub fn worst(&self) -> &ParamCheck {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .expect("at least one parameter")
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().rel_error
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.rel_error < self.tolerance)
    }

    /// Distinct parameter groups covered, in first-seen order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.checks {
            if !out.contains(&c.group) {
                out.push(c.group.clone());
            }
        }
        out
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<28} {:<10} {:>12} {:>12} {:>12}\n", "parameter", "group", "rel_error", "|analytic|", "|numeric|");
        for c in &self.checks {
            s.push_str(&format!(
                "{:<28} {:<10} {:>12.3e} {:>12.3e} {:>12.3e}\n",
                c.name, c.group, c.rel_error, c.analytic_norm, c.numeric_norm
            ));
        }
        s.push_str(&format!(
            "max rel. error {:.3e} ({}), tolerance {:.0e}, gate margin {:.4}, mixed experts {}\n",
            self.max_rel_error(),
            self.worst().name,
            self.tolerance,
            self.min_margin,
            self.mixed_experts
        ));
        s
    }
}

fn weights() -> LossWeights {
    // large coefficients so every loss term visibly shapes the gradient
    LossWeights {
        lambda1: 1.0,
        lambda2: 0.1,
        z_coef: 0.1,
        aux_target: AuxTarget::Historical,
    }
}

fn data_config() -> SynthConfig {
    SynthConfig {
        n_classes: 3,
        frames: 6,
        dim: 16,
        min_events: 1,
        max_events: 2,
        saliency: vec![1, 4, 2],
        text_vocab: 16,
        min_duration: 1.0,
        max_duration: 3.0,
        ..SynthConfig::default()
    }
}

fn model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d: 16,
        blocks: 1,
        attn_heads: 2,
        expert_hidden: 8,
        k_init: 4,
        text_vocab: 16,
        max_frames: 6,
        max_target: 40,
        gating: GatingKind::Dynamic,
        // a strong task-rate term splits tokens into two well-separated bands
        alpha: 9.0,
        seed,
        ..ModelConfig::default()
    }
}

fn record_anchors(model: &Model, batch: &[&SyntheticSample], w: &LossWeights) -> Result<Vec<Matrix>> {
    let mut g = Graph::with_ste_mode(SteMode::Record(Vec::new()));
    let mut binder = Binder::new();
    model.loss_graph(&mut g, &mut binder, batch, 3, ALL_GROUPS, w)?;
    match g.take_ste_mode() {
        SteMode::Record(a) => Ok(a),
        _ => unreachable!("graph was built in record mode"),
    }
}

fn replay_loss(model: &Model, batch: &[&SyntheticSample], w: &LossWeights, anchors: &[Matrix]) -> Result<f64> {
    let mut g = Graph::with_ste_mode(SteMode::Replay {
        anchors: anchors.to_vec(),
        cursor: 0,
    });
    let mut binder = Binder::new();
    let lg = model.loss_graph(&mut g, &mut binder, batch, 3, ALL_GROUPS, w)?;
    Ok(g.value(lg.total).get(0, 0))
}

/// Places each expert's threshold in the widest gap of its gate values,
/// preferring gaps that leave tokens on both sides.
fn place_thresholds(model: &mut Model, anchors: &[Matrix]) {
    let mut layer = 0;
    for b in &mut model.blocks {
        let FeedForward::Moe(m) = &mut b.ffn else { continue };
        let p = &anchors[layer];
        layer += 1;
        for e in 0..m.experts.len() {
            let shift = crate::numerics::sigmoid(m.gating.thresholds.value.get(0, e));
            let mut q: Vec<f64> = p.column(e).iter().map(|v| v + shift).collect();
            q.sort_by(f64::total_cmp);
            let interior = q.windows(2).map(|w| (w[1] - w[0], 0.5 * (w[0] + w[1]))).max_by(|a, b| a.0.total_cmp(&b.0));
            let mid = match interior {
                Some((gap, mid)) if gap > 2.0 * MIN_MARGIN => mid,
                _ => 0.5 * q[0],
            };
            m.gating.thresholds.value.set(0, e, (mid / (1.0 - mid)).ln());
        }
    }
}

fn margins(anchors: &[Matrix]) -> (f64, usize) {
    let mut min = f64::INFINITY;
    let mut mixed = 0;
    for p in anchors {
        for e in 0..p.cols() {
            let col = p.column(e);
            min = col.iter().fold(min, |m, v| m.min(v.abs()));
            if col.iter().any(|&v| v > 0.0) && col.iter().any(|&v| v <= 0.0) {
                mixed += 1;
            }
        }
    }
    (min, mixed)
}

/// A model and batch whose gate pre-activations all clear [`MIN_MARGIN`]
/// with at least one expert splitting the batch.
fn fixture(seed: u64) -> Result<(Model, Vec<SyntheticSample>, u64)> {
    let w = weights();
    let dc = data_config();
    for attempt in 0..32u64 {
        let s = seed.wrapping_add(attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut model = Model::new(model_config(s))?;
        for stage in 1..=3 {
            model.enter_stage(stage, &mut rng)?;
        }
        for b in &mut model.blocks {
            if let FeedForward::Moe(m) = &mut b.ffn {
                let k = m.experts.len();
                for t in 0..m.record.a.rows() {
                    for e in 0..k {
                        m.record.a.set(t, e, ((t + e) % 2) as f64);
                    }
                }
                m.record.a_e = (0..k).map(|e| 0.2 + 0.15 * e as f64).collect();
            }
        }
        let data = gen_split(&dc, 2, 1000 + s)?;
        let batch: Vec<&SyntheticSample> = data.iter().collect();
        let anchors = record_anchors(&model, &batch, &w)?;
        place_thresholds(&mut model, &anchors);
        let anchors = record_anchors(&model, &batch, &w)?;
        let (min, mixed) = margins(&anchors);
        if min > MIN_MARGIN && mixed > 0 {
            return Ok((model, data, s));
        }
    }
    Err(Error::contract("no gradient-check fixture with well-separated gates found"))
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let w = weights();
    let (mut model, data, seed) = fixture(opts.seed)?;
    let batch: Vec<&SyntheticSample> = data.iter().collect();
    if let Some(name) = &opts.corrupt {
        if !model.params().iter().any(|(n, _, _)| n == name) {
            return Err(Error::Config(format!("gradcheck: no parameter named `{name}`")));
        }
    }
    let anchors = record_anchors(&model, &batch, &w)?;
    let (min_margin, mixed_experts) = margins(&anchors);

    let mut g = Graph::new();
    let mut binder = Binder::new();
    let lg = model.loss_graph(&mut g, &mut binder, &batch, 3, ALL_GROUPS, &w)?;
    let grads = g.backward(lg.total)?;
    let analytic: Vec<(String, String, Matrix)> = model
        .params()
        .into_iter()
        .map(|(name, group, p)| {
            let (r, c) = p.shape();
            let mut a = binder
                .node(p)
                .and_then(|n| grads.get(n))
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(r, c));
            if opts.corrupt.as_deref() == Some(name.as_str()) {
                a = a.scale(1.5);
            }
            (name, format!("{group:?}"), a)
        })
        .collect();

    let mut checks = Vec::with_capacity(analytic.len());
    for (k, (name, group, a)) in analytic.into_iter().enumerate() {
        let theta = model.params()[k].2.value.clone();
        let mut failure = None;
        let numeric = finite_diff(
            |probe| {
                model.params_mut()[k].2.value = probe.clone();
                replay_loss(&model, &batch, &w, &anchors).unwrap_or_else(|e| {
                    failure = Some(e);
                    f64::NAN
                })
            },
            &theta,
            opts.step,
        );
        model.params_mut()[k].2.value = theta;
        if let Some(e) = failure {
            return Err(e);
        }
        let diff = a.zip_map(&numeric, |x, y| x - y).frobenius_norm();
        let (an, nn) = (a.frobenius_norm(), numeric.frobenius_norm());
        let scale = an.max(nn);
        checks.push(ParamCheck {
            name,
            group,
            rel_error: if scale == 0.0 { 0.0 } else { diff / scale },
            analytic_norm: an,
            numeric_norm: nn,
        });
    }
    Ok(GradcheckReport {
        checks,
        tolerance: opts.tolerance,
        min_margin,
        mixed_experts,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_model_gradients_match_surrogate_differences() {
        let t = std::time::Instant::now();
        let report = run_gradcheck(&GradcheckOptions::default()).unwrap();
        eprintln!("{}{:?}", report.render(), t.elapsed());
        assert!(report.passed(), "{}", report.render());
    }
}
