use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_codec::{encode_events, TokenId};
use crate::lifecycle::{maybe_add_expert, remove_stale_experts, LifecycleAction, LifecycleConfig, LifecycleEvent};
use crate::losses::{aux_loss, cross_entropy_multi, stage_loss, z_loss_multi, AuxTarget, LossParts, LossWeights};
use crate::numerics::{log_sum_exp, Binder, Graph, Matrix, NodeId};
use crate::synthdata::SyntheticSample;

use super::forward::Forward;
use super::{FeedForward, Model, SeqInput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            batch_size: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("train.beta1/beta2 must lie in [0,1)".into()));
        }
        if !(self.eps > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("train.eps and train.grad_clip must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything a training step needs besides the model and data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainContext {
    pub train: TrainConfig,
    pub lifecycle: LifecycleConfig,
    pub losses: LossWeights,
}

/// Loss components and routing summary of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub stage: u8,
    pub ce: f64,
    pub z: f64,
    pub aux: f64,
    pub total: f64,
    /// Mean active experts per token over MoE blocks (0 without MoE).
    pub active_experts_mean: f64,
    /// Expert count per block after the step (0 for dense blocks).
    pub experts: Vec<usize>,
    pub events: Vec<LifecycleEvent>,
}

pub(crate) struct LossGraph {
    pub forward: Forward,
    pub total: NodeId,
    pub ce: NodeId,
    pub z: NodeId,
    pub aux: NodeId,
}

/// Teacher-forced inputs and head-local targets for a batch.
pub(crate) fn teacher_batch<'a>(
    model: &Model,
    batch: &[&'a SyntheticSample],
) -> Result<(Vec<SeqInput<'a>>, Vec<Vec<usize>>)> {
    let mut seqs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for s in batch {
        let stream = encode_events(&s.gold);
        let seq = SeqInput::teacher(&s.frames, &s.frame_timestamps, &s.query, &stream)?;
        let ids: Vec<TokenId> = stream.ids();
        let t = seq
            .predict
            .iter()
            .zip(&ids)
            .map(|(&h, &id)| {
                model
                    .config
                    .head_index(h, id)
                    .ok_or_else(|| Error::contract(format!("target token {id} not emitted by the {h:?} head")))
            })
            .collect::<Result<Vec<usize>>>()?;
        seqs.push(seq);
        targets.push(t);
    }
    Ok((seqs, targets))
}

impl Model {
    /// Forward pass plus the stage objective over a teacher-forced batch.
    pub(crate) fn loss_graph(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        batch: &[&SyntheticSample],
        stage: u8,
        train_stage: u8,
        weights: &LossWeights,
    ) -> Result<LossGraph> {
        let (seqs, targets) = teacher_batch(self, batch)?;
        let forward = self.forward_graph(g, binder, &seqs, train_stage)?;
        let ce_parts: Vec<(NodeId, Vec<Option<usize>>)> = forward
            .heads
            .iter()
            .map(|h| (h.logits, h.rows.iter().map(|&(s, j)| Some(targets[s][j])).collect()))
            .collect();
        let ce = cross_entropy_multi(g, &ce_parts)?;
        let logits: Vec<NodeId> = forward.heads.iter().map(|h| h.logits).collect();
        let z = z_loss_multi(g, &logits)?;
        let mut aux: Option<NodeId> = None;
        for (block, out) in self.blocks.iter().zip(&forward.moe) {
            let (FeedForward::Moe(layer), Some(out)) = (&block.ffn, out) else {
                continue;
            };
            let a_e = match weights.aux_target {
                AuxTarget::Historical => layer.record.a_e.clone(),
                AuxTarget::Batch => {
                    let mut counts = vec![0.0; layer.experts.len()];
                    for d in &out.decisions {
                        for &e in &d.active {
                            counts[e] += 1.0;
                        }
                    }
                    counts
                }
            };
            let term = aux_loss(g, &a_e, out.soft_mass, out.w_g, weights)?;
            aux = Some(match aux {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        let aux = match aux {
            Some(a) => a,
            None => g.constant(Matrix::scalar(0.0)),
        };
        let total = stage_loss(g, stage, LossParts { ce, z, aux }, weights)?;
        Ok(LossGraph {
            forward,
            total,
            ce,
            z,
            aux,
        })
    }

    /// Moves to `stage`, which must directly follow the current one.
    /// Entering stage 2 replaces dense feed-forwards with experts.
    pub fn enter_stage<R: Rng + ?Sized>(&mut self, stage: u8, rng: &mut R) -> Result<()> {
        if !(1..=3).contains(&stage) || stage != self.stage + 1 {
            return Err(Error::contract(format!(
                "stage {stage} cannot follow stage {}; stages run 1 -> 2 -> 3",
                self.stage
            )));
        }
        if stage == 2 {
            self.introduce_experts(rng)?;
        }
        self.stage = stage;
        self.reset_optimizer();
        Ok(())
    }

    /// One optimizer step of the current stage on `batch`.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[&SyntheticSample],
        ctx: &TrainContext,
        rng: &mut R,
    ) -> Result<StepReport> {
        let stage = self.stage;
        if !(1..=3).contains(&stage) {
            return Err(Error::contract("train_step before enter_stage"));
        }
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let lg = self.loss_graph(&mut g, &mut binder, batch, stage, stage, &ctx.losses)?;
        let value = |n: NodeId| g.value(n).get(0, 0);
        let (ce, z, aux, total) = (value(lg.ce), value(lg.z), value(lg.aux), value(lg.total));
        let step = self.step + 1;
        let non_finite = |what: &str| Error::NonFinite {
            step,
            stage,
            parts: format!("{what}: ce={ce} z={z} aux={aux} total={total}"),
        };
        if !total.is_finite() {
            return Err(non_finite("loss"));
        }
        let grads = g.backward(lg.total)?;

        let tc = &ctx.train;
        let mut collected: Vec<Option<Matrix>> = Vec::new();
        let mut norm_sq = 0.0;
        for (_, group, p) in self.params() {
            let gr = if group.trainable_in(stage) {
                binder.node(p).and_then(|n| grads.get(n)).cloned()
            } else {
                None
            };
            if let Some(gm) = &gr {
                norm_sq += gm.sum_squares();
            }
            collected.push(gr);
        }
        if !norm_sq.is_finite() {
            return Err(non_finite("gradient"));
        }
        let norm = norm_sq.sqrt();
        let clip = if norm > tc.grad_clip { tc.grad_clip / norm } else { 1.0 };
        self.opt_step += 1;
        let t = self.opt_step as i32;
        let bc1 = 1.0 - tc.beta1.powi(t);
        let bc2 = 1.0 - tc.beta2.powi(t);
        for ((_, _, p), gr) in self.params_mut().into_iter().zip(collected) {
            let Some(gr) = gr else { continue };
            let n = p.value.len();
            for i in 0..n {
                let gi = gr.data()[i] * clip;
                let m = tc.beta1 * p.m.data()[i] + (1.0 - tc.beta1) * gi;
                let v = tc.beta2 * p.v.data()[i] + (1.0 - tc.beta2) * gi * gi;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                p.value.data_mut()[i] -= tc.lr * (m / bc1) / ((v / bc2).sqrt() + tc.eps);
            }
        }
        self.step = step;

        let lifecycle_on = stage == 2 || (stage == 3 && ctx.lifecycle.in_finetune);
        let mut events = Vec::new();
        let mut active_sum = 0.0;
        let mut active_layers = 0usize;
        let Forward { moe, ffn_inputs, tags, .. } = lg.forward;
        for (li, (block, out)) in self.blocks.iter_mut().zip(moe).enumerate() {
            let (FeedForward::Moe(layer), Some(out)) = (&mut block.ffn, out) else {
                continue;
            };
            let n = out.decisions.len().max(1);
            active_sum += out.decisions.iter().map(|d| d.active.len()).sum::<usize>() as f64 / n as f64;
            active_layers += 1;
            layer
                .record
                .record_batch(&out.decisions, &tags, g.value(ffn_inputs[li]), ctx.lifecycle.ema_decay)?;
            if lifecycle_on && ctx.lifecycle.is_check_step(layer.record.step) {
                let removal = remove_stale_experts(&mut layer.record, &mut layer.gating, &mut layer.experts, &ctx.lifecycle);
                for e in removal.removed {
                    events.push(LifecycleEvent {
                        step,
                        stage,
                        layer: li,
                        action: LifecycleAction::Remove,
                        expert: e,
                    });
                }
                if let Some(e) = maybe_add_expert(&mut layer.record, &mut layer.gating, &mut layer.experts, &ctx.lifecycle, rng) {
                    events.push(LifecycleEvent {
                        step,
                        stage,
                        layer: li,
                        action: LifecycleAction::Add,
                        expert: e,
                    });
                }
            }
            layer.gating.renormalize();
        }
        Ok(StepReport {
            step,
            stage,
            ce,
            z,
            aux,
            total,
            active_experts_mean: if active_layers == 0 { 0.0 } else { active_sum / active_layers as f64 },
            experts: self.experts_per_layer(),
            events,
        })
    }
}

impl Model {
    /// Token-mean cross-entropy of the gold streams of `samples` under
    /// teacher forcing, pooled over all samples.
    pub fn mean_cross_entropy(&self, samples: &[SyntheticSample]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for s in samples {
            let stream = encode_events(&s.gold);
            let seq = SeqInput::teacher(&s.frames, &s.frame_timestamps, &s.query, &stream)?;
            for (p, id) in self.forward(&seq)?.iter().zip(stream.ids()) {
                let target = self
                    .config
                    .head_index(p.head, id)
                    .ok_or_else(|| Error::contract(format!("token {id} outside its head")))?;
                total += log_sum_exp(&p.logits) - p.logits[target];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::contract("mean_cross_entropy needs at least one target token"));
        }
        Ok(total / count as f64)
    }
}

/// Enters `stage` and runs `steps` optimizer steps on random batches of
/// `data`, calling `observe` after every step.
pub fn run_stage<R: Rng + ?Sized>(
    model: &mut Model,
    stage: u8,
    data: &[SyntheticSample],
    steps: usize,
    ctx: &TrainContext,
    rng: &mut R,
    mut observe: impl FnMut(&StepReport),
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::contract("run_stage needs a nonempty dataset"));
    }
    model.enter_stage(stage, rng)?;
    let b = ctx.train.batch_size.min(data.len());
    for _ in 0..steps {
        let idx = rand::seq::index::sample(rng, data.len(), b);
        let batch: Vec<&SyntheticSample> = idx.iter().map(|i| &data[i]).collect();
        let report = model.train_step(&batch, ctx, rng)?;
        observe(&report);
    }
    Ok(())
}
