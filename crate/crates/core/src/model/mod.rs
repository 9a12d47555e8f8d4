//! Causal decoder with per-block MoE feed-forward layers and three output
//! heads (time, score, text).
//!
//! A sequence is the fused visual tokens, the query tokens and the
//! (shifted) target tokens. Target tokens are embedded with the table of the
//! head that emits them, and each target position is predicted by the head
//! its grammar state selects.

mod checkpoint;
mod forward;
mod generate;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_codec::{HeadKind, TokenId, EOS, SYNC, TEXT_BASE};
use crate::gating::{Expert, GateMode, GatingParams, TaskRateMode};
use crate::lifecycle::RoutingRecord;
use crate::numerics::{Matrix, Param};

pub use checkpoint::{checkpoint_digest, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{PositionLogits, RoutingTrace, SeqInput};
pub use generate::GenerationOutput;
pub use train::{run_stage, StepReport, TrainConfig, TrainContext};

/// Rows of the time and score tables and columns of their heads.
pub const NUMBER_VOCAB: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatingKind {
    Dynamic,
    Topk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub blocks: usize,
    pub attn_heads: usize,
    pub expert_hidden: usize,
    pub k_init: usize,
    pub text_vocab: usize,
    pub max_frames: usize,
    /// Longest target token stream the context admits.
    pub max_target: usize,
    pub gating: GatingKind,
    /// Experts per token under top-k gating.
    pub k: usize,
    pub alpha: f64,
    pub task_rates: TaskRateMode,
    /// Noise stdev when cloning the dense FFN into experts.
    pub expert_noise: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            blocks: 2,
            attn_heads: 2,
            expert_hidden: 128,
            k_init: 8,
            text_vocab: 64,
            max_frames: 32,
            max_target: 64,
            gating: GatingKind::Dynamic,
            k: 2,
            alpha: 0.2,
            task_rates: TaskRateMode::PerExpert,
            expert_noise: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.attn_heads == 0 || self.d % self.attn_heads != 0 {
            return bad(format!("model.d {} must be a positive multiple of model.attn_heads {}", self.d, self.attn_heads));
        }
        if self.blocks == 0 || self.expert_hidden == 0 || self.max_frames == 0 || self.max_target == 0 {
            return bad("model.blocks, expert_hidden, max_frames and max_target must be >= 1".into());
        }
        if self.text_vocab == 0 {
            return bad("model.text_vocab must be >= 1".into());
        }
        if self.k_init == 0 {
            return bad("model.k_init must be >= 1".into());
        }
        if self.gating == GatingKind::Topk && (self.k == 0 || self.k > self.k_init) {
            return bad(format!("model.k {} outside 1..={}", self.k, self.k_init));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("model.alpha {} must be finite and >= 0", self.alpha));
        }
        if !(self.expert_noise >= 0.0) {
            return bad("model.expert_noise must be >= 0".into());
        }
        Ok(())
    }

    pub fn gate_mode(&self) -> GateMode {
        match self.gating {
            GatingKind::Dynamic => GateMode::Dynamic,
            GatingKind::Topk => GateMode::TopK(self.k),
        }
    }

    /// Positions available to one sequence.
    pub fn context(&self) -> usize {
        self.max_frames + QUERY_LEN + self.max_target
    }

    pub fn head_width(&self, head: HeadKind) -> usize {
        match head {
            HeadKind::Time | HeadKind::Score => NUMBER_VOCAB,
            HeadKind::Text => self.text_vocab + 2,
        }
    }

    /// Column of `id` in `head`'s output, if the head can emit it.
    pub fn head_index(&self, head: HeadKind, id: TokenId) -> Option<usize> {
        match head {
            HeadKind::Time | HeadKind::Score => ((id as usize) < NUMBER_VOCAB).then_some(id as usize),
            HeadKind::Text => match id {
                SYNC => Some(self.text_vocab),
                EOS => Some(self.text_vocab + 1),
                id if id >= TEXT_BASE && ((id - TEXT_BASE) as usize) < self.text_vocab => {
                    Some((id - TEXT_BASE) as usize)
                }
                _ => None,
            },
        }
    }

    /// Inverse of [`ModelConfig::head_index`].
    pub fn head_token(&self, head: HeadKind, index: usize) -> TokenId {
        match head {
            HeadKind::Time | HeadKind::Score => index as TokenId,
            HeadKind::Text if index == self.text_vocab => SYNC,
            HeadKind::Text if index == self.text_vocab + 1 => EOS,
            HeadKind::Text => TEXT_BASE + index as TokenId,
        }
    }

    /// Row of `(head, index)` in the stacked time/score/text embedding table.
    pub(crate) fn vocab_row(&self, head: HeadKind, index: usize) -> usize {
        match head {
            HeadKind::Time => index,
            HeadKind::Score => NUMBER_VOCAB + index,
            HeadKind::Text => 2 * NUMBER_VOCAB + index,
        }
    }

    pub(crate) fn vocab_rows(&self) -> usize {
        2 * NUMBER_VOCAB + self.text_vocab + 2
    }
}

/// Pseudo-stage in which every group is trainable (gradient checks).
pub(crate) const ALL_GROUPS: u8 = u8::MAX;

pub const QUERY_LEN: usize = 2;

/// Parameter families; stages train different subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Frame fusion table (frozen in fine-tuning).
    Frame,
    Embedding,
    Attention,
    Norm,
    Dense,
    Gating,
    Expert,
    Head,
}

impl ParamGroup {
    /// Whether the group is trained in `stage` (0 = inference).
    pub fn trainable_in(self, stage: u8) -> bool {
        match stage {
            1 => !matches!(self, ParamGroup::Gating | ParamGroup::Expert),
            2 => matches!(self, ParamGroup::Gating | ParamGroup::Expert),
            3 => self != ParamGroup::Frame,
            ALL_GROUPS => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    /// d×d projection applied to frame features.
    pub frame: Param,
    pub time: Param,
    pub score: Param,
    pub text: Param,
    pub pos: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub wo: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub gating: GatingParams,
    pub experts: Vec<Expert>,
    pub record: RoutingRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeedForward {
    Dense(Expert),
    Moe(MoeLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Param,
    pub attn: Attention,
    pub ffn_norm: Param,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub norm: Param,
    pub time: Param,
    pub score: Param,
    pub text: Param,
}

/// Full decoder state.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// Last stage entered (0 before training).
    pub stage: u8,
    /// Optimizer steps over all stages.
    pub step: u64,
    /// Optimizer steps since the current stage began (Adam bias correction).
    pub opt_step: u64,
    pub embed: Embeddings,
    pub blocks: Vec<Block>,
    pub heads: Heads,
}

fn randn(r: usize, c: usize, std: f64, rng: &mut ChaCha8Rng) -> Param {
    Param::new(Matrix::randn(r, c, std, rng))
}

fn ones(c: usize) -> Param {
    Param::new(Matrix::filled(1, c, 1.0))
}

impl Model {
    /// Freshly initialised stage-0 model with dense feed-forward blocks.
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d;
        let s = 1.0 / (d as f64).sqrt();
        let embed = Embeddings {
            frame: randn(d, d, s, &mut rng),
            time: randn(NUMBER_VOCAB, d, s, &mut rng),
            score: randn(NUMBER_VOCAB, d, s, &mut rng),
            text: randn(config.text_vocab + 2, d, s, &mut rng),
            pos: randn(config.context(), d, 0.5 * s, &mut rng),
        };
        let blocks = (0..config.blocks)
            .map(|_| Block {
                attn_norm: ones(d),
                attn: Attention {
                    wq: randn(d, d, s, &mut rng),
                    wk: randn(d, d, s, &mut rng),
                    wv: randn(d, d, s, &mut rng),
                    wo: randn(d, d, 0.5 * s, &mut rng),
                },
                ffn_norm: ones(d),
                ffn: FeedForward::Dense(Expert::new(d, config.expert_hidden, &mut rng)),
            })
            .collect();
        let heads = Heads {
            norm: ones(d),
            time: randn(d, NUMBER_VOCAB, s, &mut rng),
            score: randn(d, NUMBER_VOCAB, s, &mut rng),
            text: randn(d, config.text_vocab + 2, s, &mut rng),
        };
        Ok(Model {
            config,
            stage: 0,
            step: 0,
            opt_step: 0,
            embed,
            blocks,
            heads,
        })
    }

    /// Every parameter with a stable name, in a fixed order.
    pub fn params(&self) -> Vec<(String, ParamGroup, &Param)> {
        let mut out: Vec<(String, ParamGroup, &Param)> = Vec::new();
        let e = &self.embed;
        out.push(("embed.frame".into(), ParamGroup::Frame, &e.frame));
        out.push(("embed.time".into(), ParamGroup::Embedding, &e.time));
        out.push(("embed.score".into(), ParamGroup::Embedding, &e.score));
        out.push(("embed.text".into(), ParamGroup::Embedding, &e.text));
        out.push(("embed.pos".into(), ParamGroup::Embedding, &e.pos));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.attn_norm"), ParamGroup::Norm, &b.attn_norm));
            out.push((format!("blocks.{i}.attn.wq"), ParamGroup::Attention, &b.attn.wq));
            out.push((format!("blocks.{i}.attn.wk"), ParamGroup::Attention, &b.attn.wk));
            out.push((format!("blocks.{i}.attn.wv"), ParamGroup::Attention, &b.attn.wv));
            out.push((format!("blocks.{i}.attn.wo"), ParamGroup::Attention, &b.attn.wo));
            out.push((format!("blocks.{i}.ffn_norm"), ParamGroup::Norm, &b.ffn_norm));
            match &b.ffn {
                FeedForward::Dense(ex) => {
                    for (n, p) in EXPERT_PARAMS.iter().zip(ex.params()) {
                        out.push((format!("blocks.{i}.dense.{n}"), ParamGroup::Dense, p));
                    }
                }
                FeedForward::Moe(m) => {
                    out.push((format!("blocks.{i}.gating.w_g"), ParamGroup::Gating, &m.gating.w_g));
                    out.push((format!("blocks.{i}.gating.thresholds"), ParamGroup::Gating, &m.gating.thresholds));
                    for (k, ex) in m.experts.iter().enumerate() {
                        for (n, p) in EXPERT_PARAMS.iter().zip(ex.params()) {
                            out.push((format!("blocks.{i}.experts.{k}.{n}"), ParamGroup::Expert, p));
                        }
                    }
                }
            }
        }
        let h = &self.heads;
        out.push(("heads.norm".into(), ParamGroup::Norm, &h.norm));
        out.push(("heads.time".into(), ParamGroup::Head, &h.time));
        out.push(("heads.score".into(), ParamGroup::Head, &h.score));
        out.push(("heads.text".into(), ParamGroup::Head, &h.text));
        out
    }

    /// Mutable counterpart of [`Model::params`], same order and names.
    pub fn params_mut(&mut self) -> Vec<(String, ParamGroup, &mut Param)> {
        let mut out: Vec<(String, ParamGroup, &mut Param)> = Vec::new();
        let e = &mut self.embed;
        out.push(("embed.frame".into(), ParamGroup::Frame, &mut e.frame));
        out.push(("embed.time".into(), ParamGroup::Embedding, &mut e.time));
        out.push(("embed.score".into(), ParamGroup::Embedding, &mut e.score));
        out.push(("embed.text".into(), ParamGroup::Embedding, &mut e.text));
        out.push(("embed.pos".into(), ParamGroup::Embedding, &mut e.pos));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.attn_norm"), ParamGroup::Norm, &mut b.attn_norm));
            out.push((format!("blocks.{i}.attn.wq"), ParamGroup::Attention, &mut b.attn.wq));
            out.push((format!("blocks.{i}.attn.wk"), ParamGroup::Attention, &mut b.attn.wk));
            out.push((format!("blocks.{i}.attn.wv"), ParamGroup::Attention, &mut b.attn.wv));
            out.push((format!("blocks.{i}.attn.wo"), ParamGroup::Attention, &mut b.attn.wo));
            out.push((format!("blocks.{i}.ffn_norm"), ParamGroup::Norm, &mut b.ffn_norm));
            match &mut b.ffn {
                FeedForward::Dense(ex) => {
                    for (n, p) in EXPERT_PARAMS.iter().zip(ex.params_mut()) {
                        out.push((format!("blocks.{i}.dense.{n}"), ParamGroup::Dense, p));
                    }
                }
                FeedForward::Moe(m) => {
                    out.push((format!("blocks.{i}.gating.w_g"), ParamGroup::Gating, &mut m.gating.w_g));
                    out.push((format!("blocks.{i}.gating.thresholds"), ParamGroup::Gating, &mut m.gating.thresholds));
                    for (k, ex) in m.experts.iter_mut().enumerate() {
                        for (n, p) in EXPERT_PARAMS.iter().zip(ex.params_mut()) {
                            out.push((format!("blocks.{i}.experts.{k}.{n}"), ParamGroup::Expert, p));
                        }
                    }
                }
            }
        }
        let h = &mut self.heads;
        out.push(("heads.norm".into(), ParamGroup::Norm, &mut h.norm));
        out.push(("heads.time".into(), ParamGroup::Head, &mut h.time));
        out.push(("heads.score".into(), ParamGroup::Head, &mut h.score));
        out.push(("heads.text".into(), ParamGroup::Head, &mut h.text));
        out
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = &MoeLayer> {
        self.blocks.iter().filter_map(|b| match &b.ffn {
            FeedForward::Moe(m) => Some(m),
            FeedForward::Dense(_) => None,
        })
    }

    /// Routing records of all MoE blocks, in block order.
    pub fn routing_records(&self) -> Vec<RoutingRecord> {
        self.moe_layers().map(|m| m.record.clone()).collect()
    }

    /// Expert count per block (0 for dense blocks).
    pub fn experts_per_layer(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .map(|b| match &b.ffn {
                FeedForward::Moe(m) => m.experts.len(),
                FeedForward::Dense(_) => 0,
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|(_, _, p)| p.value.is_finite())
    }

    /// Replaces every dense feed-forward with `k_init` noisy clones behind a
    /// fresh gate.
    pub(crate) fn introduce_experts<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let cfg = self.config.clone();
        for b in &mut self.blocks {
            if let FeedForward::Dense(ffn) = &b.ffn {
                let experts: Vec<Expert> = (0..cfg.k_init).map(|_| ffn.perturbed(cfg.expert_noise, rng)).collect();
                let mut gating = GatingParams::new(cfg.d, cfg.k_init, cfg.gate_mode(), cfg.alpha, rng);
                gating.task_rates = cfg.task_rates;
                gating.validate()?;
                b.ffn = FeedForward::Moe(MoeLayer {
                    gating,
                    experts,
                    record: RoutingRecord::new(cfg.k_init, cfg.d),
                });
            }
        }
        Ok(())
    }

    /// Zeroes all optimizer moments.
    pub(crate) fn reset_optimizer(&mut self) {
        self.opt_step = 0;
        for (_, _, p) in self.params_mut() {
            p.reset_moments();
        }
    }
}

const EXPERT_PARAMS: [&str; 4] = ["w1", "b1", "w2", "b2"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_index_round_trip() {
        let cfg = ModelConfig::default();
        for head in [HeadKind::Time, HeadKind::Score, HeadKind::Text] {
            for i in 0..cfg.head_width(head) {
                let id = cfg.head_token(head, i);
                assert_eq!(cfg.head_index(head, id), Some(i));
            }
        }
        assert_eq!(cfg.head_index(HeadKind::Time, TEXT_BASE), None);
        assert_eq!(cfg.head_index(HeadKind::Text, 3), None);
    }

    #[test]
    fn stage_groups() {
        use ParamGroup::*;
        assert!(Frame.trainable_in(1) && !Frame.trainable_in(3) && !Frame.trainable_in(2));
        assert!(Gating.trainable_in(2) && Expert.trainable_in(2) && !Head.trainable_in(2));
        assert!(Head.trainable_in(3) && Gating.trainable_in(3));
        assert!(!Head.trainable_in(0));
    }

    #[test]
    fn param_names_are_unique_and_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Model::new(ModelConfig { d: 8, expert_hidden: 4, k_init: 3, ..ModelConfig::default() }).unwrap();
        m.introduce_experts(&mut rng).unwrap();
        let names: Vec<String> = m.params().into_iter().map(|(n, _, _)| n).collect();
        let set: std::collections::HashSet<&String> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        let mut_names: Vec<String> = m.params_mut().into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(names, mut_names);
        assert_eq!(m.experts_per_layer(), vec![3, 3]);
    }

    #[test]
    fn invalid_configs() {
        assert!(ModelConfig { d: 63, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { gating: GatingKind::Topk, k: 9, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { alpha: -1.0, ..ModelConfig::default() }.validate().is_err());
    }
}
