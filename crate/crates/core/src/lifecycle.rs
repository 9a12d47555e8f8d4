//! Routing statistics and the expert add/remove lifecycle.

use std::fmt::Write as _;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_codec::TaskType;
use crate::gating::{Expert, GateMode, GatingParams, RoutingDecision};
use crate::numerics::{Matrix, Param};

/// Per-layer routing history.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord {
    /// EMA activation rate per (task type, expert).
    pub a: Matrix,
    /// EMA activation rate per expert over all tokens.
    pub a_e: Vec<f64>,
    /// Step at which each expert last fired.
    pub last_active: Vec<Option<u64>>,
    /// Running mean of unrouted token embeddings.
    pub unrouted_mean: Vec<f64>,
    pub unrouted_count: u64,
    /// EMA of the per-batch unrouted fraction.
    pub unrouted_frac: f64,
    pub step: u64,
}

impl RoutingRecord {
    pub fn new(num_experts: usize, dim: usize) -> Self {
        RoutingRecord {
            a: Matrix::zeros(TaskType::COUNT, num_experts),
            a_e: vec![0.0; num_experts],
            last_active: vec![None; num_experts],
            unrouted_mean: vec![0.0; dim],
            unrouted_count: 0,
            unrouted_frac: 0.0,
            step: 0,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.a_e.len()
    }

    pub fn task_rates(&self, tag: TaskType) -> &[f64] {
        self.a.row(tag.index())
    }

    /// Folds one batch of routing decisions into the EMAs.
    ///
    /// `embeddings` are the gate inputs; rows of unrouted tokens feed the
    /// running mean used to seed new experts.
    pub fn record_batch(
        &mut self,
        decisions: &[RoutingDecision],
        tags: &[TaskType],
        embeddings: &Matrix,
        beta: f64,
    ) -> Result<()> {
        if decisions.len() != tags.len() || embeddings.rows() != tags.len() {
            return Err(Error::contract(format!(
                "record_batch: {} decisions, {} tags, {} embeddings",
                decisions.len(),
                tags.len(),
                embeddings.rows()
            )));
        }
        if embeddings.cols() != self.unrouted_mean.len() {
            return Err(Error::Dimension {
                op: "record_batch",
                lhs: embeddings.shape(),
                rhs: (1, self.unrouted_mean.len()),
            });
        }
        let k = self.num_experts();
        let mut hits = vec![vec![0usize; k]; TaskType::COUNT];
        let mut counts = [0usize; TaskType::COUNT];
        let mut overall = vec![0usize; k];
        let mut unrouted = 0usize;
        for (i, (d, &t)) in decisions.iter().zip(tags).enumerate() {
            counts[t.index()] += 1;
            for &e in &d.active {
                if e >= k {
                    return Err(Error::contract(format!("decision names expert {e} of {k}")));
                }
                hits[t.index()][e] += 1;
                overall[e] += 1;
                self.last_active[e] = Some(self.step);
            }
            if d.unrouted {
                unrouted += 1;
                self.unrouted_count += 1;
                let inv = 1.0 / self.unrouted_count as f64;
                for (m, x) in self.unrouted_mean.iter_mut().zip(embeddings.row(i)) {
                    *m += (x - *m) * inv;
                }
            }
        }
        for t in 0..TaskType::COUNT {
            if counts[t] == 0 {
                continue;
            }
            for e in 0..k {
                let rate = hits[t][e] as f64 / counts[t] as f64;
                let v = beta * self.a.get(t, e) + (1.0 - beta) * rate;
                self.a.set(t, e, v);
            }
        }
        let n = decisions.len();
        if n > 0 {
            for e in 0..k {
                let rate = overall[e] as f64 / n as f64;
                self.a_e[e] = beta * self.a_e[e] + (1.0 - beta) * rate;
            }
            self.unrouted_frac = beta * self.unrouted_frac + (1.0 - beta) * (unrouted as f64 / n as f64);
        }
        self.step += 1;
        Ok(())
    }

    fn reset_unrouted(&mut self) {
        self.unrouted_mean.iter_mut().for_each(|v| *v = 0.0);
        self.unrouted_count = 0;
        self.unrouted_frac = 0.0;
    }

    fn push_expert(&mut self) {
        self.a.push_column(&[0.0; TaskType::COUNT]);
        self.a_e.push(0.0);
        self.last_active.push(None);
    }

    fn remove_experts(&mut self, drop: &[usize]) {
        self.a = self.a.remove_columns(drop);
        self.a_e = retain_indices(&self.a_e, drop);
        self.last_active = retain_indices(&self.last_active, drop);
    }
}

fn retain_indices<T: Clone>(v: &[T], drop: &[usize]) -> Vec<T> {
    v.iter()
        .enumerate()
        .filter(|(i, _)| !drop.contains(i))
        .map(|(_, x)| x.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifecycleConfig {
    pub ema_decay: f64,
    pub tau_min: f64,
    pub tau_add: f64,
    pub window: u64,
    pub warmup: u64,
    pub k_min: usize,
    pub k_max: usize,
    /// Stdev of the noise added to a mean-initialised new expert.
    pub init_noise: f64,
    /// Run add/remove during fine-tuning as well as MoE pretraining.
    pub in_finetune: bool,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        LifecycleConfig {
            ema_decay: 0.99,
            tau_min: 0.01,
            tau_add: 0.05,
            window: 200,
            warmup: 500,
            k_min: 2,
            k_max: 16,
            init_noise: 0.02,
            in_finetune: true,
        }
    }
}

impl LifecycleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("lifecycle.ema_decay {} outside (0,1)", self.ema_decay)));
        }
        if !(self.tau_min > 0.0 && self.tau_min < 1.0) {
            return Err(Error::Config(format!("lifecycle.tau_min {} outside (0,1)", self.tau_min)));
        }
        if !(0.0..=1.0).contains(&self.tau_add) {
            return Err(Error::Config(format!("lifecycle.tau_add {} outside [0,1]", self.tau_add)));
        }
        if self.window == 0 {
            return Err(Error::Config("lifecycle.window must be >= 1".into()));
        }
        if self.k_min < 1 || self.k_min > self.k_max {
            return Err(Error::Config(format!(
                "lifecycle bounds need 1 <= k_min ({}) <= k_max ({})",
                self.k_min, self.k_max
            )));
        }
        if !(self.init_noise >= 0.0) {
            return Err(Error::Config("lifecycle.init_noise must be >= 0".into()));
        }
        Ok(())
    }

    /// Whether add/remove checks run after `step` recorded batches.
    pub fn is_check_step(&self, step: u64) -> bool {
        step > 0 && step >= self.warmup && step % self.window == 0
    }
}

/// Appends an expert aligned with the mean unrouted embedding when enough
/// tokens go unrouted. Returns the new expert's index.
pub fn maybe_add_expert<R: Rng + ?Sized>(
    record: &mut RoutingRecord,
    gating: &mut GatingParams,
    experts: &mut Vec<Expert>,
    cfg: &LifecycleConfig,
    rng: &mut R,
) -> Option<usize> {
    if record.unrouted_frac <= cfg.tau_add || record.unrouted_count == 0 || experts.len() >= cfg.k_max {
        return None;
    }
    let norm = record.unrouted_mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        warn!("unrouted mean is the zero vector; skipping expert addition");
        return None;
    }
    let column: Vec<f64> = record.unrouted_mean.iter().map(|v| v / norm).collect();
    gating.w_g.push_column(&column);
    gating.thresholds.push_column(&[0.0]);
    experts.push(mean_expert(experts, cfg.init_noise, rng));
    record.push_expert();
    record.reset_unrouted();
    Some(experts.len() - 1)
}

fn mean_expert<R: Rng + ?Sized>(experts: &[Expert], noise: f64, rng: &mut R) -> Expert {
    let n = experts.len() as f64;
    let mean = |pick: fn(&Expert) -> &Param| {
        let mut acc = pick(&experts[0]).value.clone();
        for e in &experts[1..] {
            acc.axpy(1.0, &pick(e).value);
        }
        Param::new(acc.scale(1.0 / n))
    };
    let base = Expert {
        w1: mean(|e| &e.w1),
        b1: mean(|e| &e.b1),
        w2: mean(|e| &e.w2),
        b2: mean(|e| &e.b2),
    };
    base.perturbed(noise, rng)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Removal {
    pub removed: Vec<usize>,
    /// Old index → new index (`None` for removed experts).
    pub remap: Vec<Option<usize>>,
}

/// Prunes experts whose overall activation rate fell below `tau_min`,
/// never going below `k_min` (or below `k` under top-k gating).
pub fn remove_stale_experts(
    record: &mut RoutingRecord,
    gating: &mut GatingParams,
    experts: &mut Vec<Expert>,
    cfg: &LifecycleConfig,
) -> Removal {
    let k = experts.len();
    let floor = match gating.mode {
        GateMode::TopK(top) => cfg.k_min.max(top),
        GateMode::Dynamic => cfg.k_min,
    };
    let mut candidates: Vec<usize> = (0..k).filter(|&e| record.a_e[e] < cfg.tau_min).collect();
    let budget = k.saturating_sub(floor);
    if candidates.len() > budget {
        // keep the most active candidates; drop the lowest
        candidates.sort_by(|&x, &y| record.a_e[x].total_cmp(&record.a_e[y]).then(x.cmp(&y)));
        candidates.truncate(budget);
        candidates.sort_unstable();
    }
    let mut remap = Vec::with_capacity(k);
    let mut next = 0;
    for e in 0..k {
        if candidates.contains(&e) {
            remap.push(None);
        } else {
            remap.push(Some(next));
            next += 1;
        }
    }
    if !candidates.is_empty() {
        gating.w_g.remove_columns(&candidates);
        gating.thresholds.remove_columns(&candidates);
        *experts = retain_indices(experts, &candidates);
        record.remove_experts(&candidates);
    }
    Removal {
        removed: candidates,
        remap,
    }
}

pub const CSV_HEADER: &str = "layer,expert,task_type,activation_rate";

/// Per-layer task × expert activation rates as CSV, sorted by
/// (layer, expert, task type).
pub fn export_activation_csv(records: &[RoutingRecord]) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (layer, record) in records.iter().enumerate() {
        for e in 0..record.num_experts() {
            for t in TaskType::ALL {
                let _ = writeln!(out, "{layer},{e},{t},{:.6}", record.a.get(t.index(), e));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LifecycleAction {
    Add,
    Remove,
}

/// One add/remove event, for the training log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleEvent {
    pub step: u64,
    pub stage: u8,
    pub layer: usize,
    pub action: LifecycleAction,
    pub expert: usize,
}
