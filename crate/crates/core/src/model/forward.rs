use crate::error::{Error, Result};
use crate::event_codec::{format_number, GrammarState, HeadKind, NumberKind, TaskType, TokenId, TokenStream};
use crate::gating::{moe_forward_graph, LayerTrainable, MoeGraphOutput, RoutingDecision};
use crate::numerics::{Binder, Graph, Matrix, NodeId, Param};

use super::{FeedForward, Model, ParamGroup, QUERY_LEN};

/// One sequence to run through the decoder.
#[derive(Debug, Clone)]
pub struct SeqInput<'a> {
    /// T×d frame features.
    pub frames: &'a Matrix,
    pub timestamps: &'a [f64],
    pub saliency: Option<&'a [f64]>,
    pub query: &'a [TokenId],
    /// Target-side input tokens (the target shifted right by one).
    pub inputs: Vec<TokenId>,
    /// Head that emitted each input token; selects its embedding table.
    pub input_heads: Vec<HeadKind>,
    pub input_tags: Vec<TaskType>,
    /// Heads of the predictions made from position
    /// `first_prediction() + predict_offset` onward.
    pub predict: Vec<HeadKind>,
    pub predict_offset: usize,
}

/// Head and grammar tag of every token of a stream.
pub(crate) fn annotate(ids: &[TokenId]) -> Result<(Vec<HeadKind>, Vec<TaskType>)> {
    let mut state = GrammarState::EventStart;
    let mut heads = Vec::with_capacity(ids.len());
    let mut tags = Vec::with_capacity(ids.len());
    for (index, &id) in ids.iter().enumerate() {
        heads.push(state.head());
        let (tag, next) = state.advance(id).map_err(|expected| crate::event_codec::ParseError {
            index,
            expected,
            found: Some(id),
        })?;
        tags.push(tag);
        state = next;
    }
    Ok((heads, tags))
}

impl<'a> SeqInput<'a> {
    /// Teacher-forced sequence predicting every token of `target`.
    pub fn teacher(frames: &'a Matrix, timestamps: &'a [f64], query: &'a [TokenId], target: &TokenStream) -> Result<Self> {
        let ids = target.ids();
        if ids.is_empty() {
            return Err(Error::contract("teacher stream is empty"));
        }
        let (heads, tags) = annotate(&ids)?;
        let n = ids.len() - 1;
        Ok(SeqInput {
            frames,
            timestamps,
            saliency: None,
            query,
            inputs: ids[..n].to_vec(),
            input_heads: heads[..n].to_vec(),
            input_tags: tags[..n].to_vec(),
            predict: heads,
            predict_offset: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows() + self.query.len() + self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sequence position of the first prediction (the last query token).
    pub fn first_prediction(&self) -> usize {
        self.frames.rows() + self.query.len() - 1
    }
}

/// Logits of one predicted position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionLogits {
    pub position: usize,
    pub head: HeadKind,
    pub logits: Vec<f64>,
}

pub(crate) struct HeadLogits {
    pub head: HeadKind,
    pub logits: NodeId,
    /// (sequence, prediction index) of every row.
    pub rows: Vec<(usize, usize)>,
}

pub(crate) struct Forward {
    pub heads: Vec<HeadLogits>,
    pub moe: Vec<Option<MoeGraphOutput>>,
    pub ffn_inputs: Vec<NodeId>,
    pub tags: Vec<TaskType>,
}

fn bind(g: &mut Graph, binder: &mut Binder, p: &Param, group: ParamGroup, stage: u8) -> NodeId {
    binder.bind(g, p, group.trainable_in(stage))
}

fn norm(g: &mut Graph, binder: &mut Binder, x: NodeId, gain: &Param, stage: u8) -> Result<NodeId> {
    let gain = bind(g, binder, gain, ParamGroup::Norm, stage);
    let n = g.rms_norm(x);
    g.mul_row(n, gain)
}

impl Model {
    fn check_seq(&self, s: &SeqInput) -> Result<()> {
        let cfg = &self.config;
        if s.frames.cols() != cfg.d {
            return Err(Error::Dimension {
                op: "frames",
                lhs: s.frames.shape(),
                rhs: (s.frames.rows(), cfg.d),
            });
        }
        if s.frames.rows() == 0 || s.frames.rows() > cfg.max_frames {
            return Err(Error::contract(format!("{} frames outside 1..={}", s.frames.rows(), cfg.max_frames)));
        }
        if s.timestamps.len() != s.frames.rows() || s.saliency.is_some_and(|h| h.len() != s.frames.rows()) {
            return Err(Error::contract("frame timestamps or saliency hints do not match the frame count"));
        }
        if s.timestamps.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::contract("frame timestamps must be nondecreasing"));
        }
        if s.query.len() != QUERY_LEN {
            return Err(Error::contract(format!("query must have {QUERY_LEN} tokens")));
        }
        if s.input_heads.len() != s.inputs.len() || s.input_tags.len() != s.inputs.len() {
            return Err(Error::contract("input heads/tags not aligned with input tokens"));
        }
        if s.predict_offset + s.predict.len() > s.inputs.len() + 1 {
            return Err(Error::contract("more predictions than positions"));
        }
        if s.len() > cfg.context() {
            return Err(Error::contract(format!("sequence of {} exceeds context of {}", s.len(), cfg.context())));
        }
        Ok(())
    }

    /// Averaging weights over the stacked vocabulary table for the time
    /// (and optional saliency) embeddings of each frame.
    fn fusion_weights(&self, timestamps: &[f64], saliency: Option<&[f64]>) -> Result<Matrix> {
        let cfg = &self.config;
        let mut w = Matrix::zeros(timestamps.len(), cfg.vocab_rows());
        for (i, &t) in timestamps.iter().enumerate() {
            let ids = format_number(t, NumberKind::Time)?;
            for &id in &ids {
                let c = cfg.vocab_row(HeadKind::Time, id as usize);
                w.set(i, c, w.get(i, c) + 1.0 / ids.len() as f64);
            }
            if let Some(h) = saliency {
                let ids = format_number(h[i], NumberKind::Score)?;
                for &id in &ids {
                    let c = cfg.vocab_row(HeadKind::Score, id as usize);
                    w.set(i, c, w.get(i, c) + 1.0 / ids.len() as f64);
                }
            }
        }
        Ok(w)
    }

    fn vocab_table(&self) -> Matrix {
        let e = &self.embed;
        let mut data = Vec::with_capacity(self.config.vocab_rows() * self.config.d);
        for t in [&e.time.value, &e.score.value, &e.text.value] {
            data.extend_from_slice(t.data());
        }
        Matrix::from_vec(self.config.vocab_rows(), self.config.d, data).expect("stacked tables")
    }

    /// Visual tokens: projected frames plus the mean time-token embedding of
    /// each frame's timestamp (and saliency hint, when given).
    pub fn fuse_frame_tokens(&self, frames: &Matrix, timestamps: &[f64], saliency: Option<&[f64]>) -> Result<Matrix> {
        if timestamps.len() != frames.rows() || saliency.is_some_and(|h| h.len() != frames.rows()) {
            return Err(Error::contract("frame timestamps or saliency hints do not match the frame count"));
        }
        if timestamps.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::contract("frame timestamps must be nondecreasing"));
        }
        let mut out = frames.matmul(&self.embed.frame.value)?;
        let mix = self.fusion_weights(timestamps, saliency)?.matmul(&self.vocab_table())?;
        out.axpy(1.0, &mix);
        Ok(out)
    }

    /// Builds the batched decoder graph. Parameters are leaves when their
    /// group trains in `stage` and constants otherwise.
    pub(crate) fn forward_graph(&self, g: &mut Graph, binder: &mut Binder, seqs: &[SeqInput], stage: u8) -> Result<Forward> {
        let cfg = &self.config;
        let d = cfg.d;
        for s in seqs {
            self.check_seq(s)?;
        }
        let e = &self.embed;
        let frame_w = bind(g, binder, &e.frame, ParamGroup::Frame, stage);
        let time_t = bind(g, binder, &e.time, ParamGroup::Embedding, stage);
        let score_t = bind(g, binder, &e.score, ParamGroup::Embedding, stage);
        let text_t = bind(g, binder, &e.text, ParamGroup::Embedding, stage);
        let pos_t = bind(g, binder, &e.pos, ParamGroup::Embedding, stage);
        let vocab = g.concat_rows(vec![time_t, score_t, text_t])?;

        let total_frames: usize = seqs.iter().map(|s| s.frames.rows()).sum();
        let mut frame_data = Vec::with_capacity(total_frames * d);
        let mut fusion = Matrix::zeros(total_frames, cfg.vocab_rows());
        let mut tok_rows = Vec::new();
        let mut layout = Vec::new();
        let mut positions = Vec::new();
        let mut tags = Vec::new();
        let mut ranges = Vec::with_capacity(seqs.len());
        let mut frame_off = 0;
        for s in seqs {
            frame_data.extend_from_slice(s.frames.data());
            let w = self.fusion_weights(s.timestamps, s.saliency)?;
            for i in 0..w.rows() {
                fusion.row_mut(frame_off + i).copy_from_slice(w.row(i));
            }
            let start = layout.len();
            for i in 0..s.frames.rows() {
                layout.push(frame_off + i);
                tags.push(TaskType::Visual);
            }
            frame_off += s.frames.rows();
            for &q in s.query {
                let idx = cfg
                    .head_index(HeadKind::Text, q)
                    .ok_or_else(|| Error::contract(format!("query token {q} is not a text token")))?;
                layout.push(total_frames + tok_rows.len());
                tok_rows.push(cfg.vocab_row(HeadKind::Text, idx));
                tags.push(TaskType::Text);
            }
            for ((&id, &head), &tag) in s.inputs.iter().zip(&s.input_heads).zip(&s.input_tags) {
                let idx = cfg
                    .head_index(head, id)
                    .ok_or_else(|| Error::contract(format!("token {id} cannot come from the {head:?} head")))?;
                layout.push(total_frames + tok_rows.len());
                tok_rows.push(cfg.vocab_row(head, idx));
                tags.push(tag);
            }
            positions.extend(0..s.len());
            ranges.push(start..layout.len());
        }
        let frames = g.constant(Matrix::from_vec(total_frames, d, frame_data)?);
        let projected = g.matmul(frames, frame_w)?;
        let fusion = g.constant(fusion);
        let time_mix = g.matmul(fusion, vocab)?;
        let visual = g.add(projected, time_mix)?;
        let mut parts = vec![visual];
        if !tok_rows.is_empty() {
            parts.push(g.gather_rows(vocab, tok_rows)?);
        }
        let stacked = g.concat_rows(parts)?;
        let x = g.gather_rows(stacked, layout)?;
        let pos = g.gather_rows(pos_t, positions)?;
        let mut x = g.add(x, pos)?;

        let heads_n = cfg.attn_heads;
        let dh = d / heads_n;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut moe = Vec::with_capacity(self.blocks.len());
        let mut ffn_inputs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let h = norm(g, binder, x, &block.attn_norm, stage)?;
            let a = &block.attn;
            let wq = bind(g, binder, &a.wq, ParamGroup::Attention, stage);
            let wk = bind(g, binder, &a.wk, ParamGroup::Attention, stage);
            let wv = bind(g, binder, &a.wv, ParamGroup::Attention, stage);
            let wo = bind(g, binder, &a.wo, ParamGroup::Attention, stage);
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let mut outs = Vec::with_capacity(seqs.len());
            for r in &ranges {
                let (qs, ks, vs) = if seqs.len() == 1 {
                    (q, k, v)
                } else {
                    let idx: Vec<usize> = r.clone().collect();
                    (
                        g.gather_rows(q, idx.clone())?,
                        g.gather_rows(k, idx.clone())?,
                        g.gather_rows(v, idx)?,
                    )
                };
                let mut per_head = Vec::with_capacity(heads_n);
                for hh in 0..heads_n {
                    let qh = g.slice_cols(qs, hh * dh, dh)?;
                    let kh = g.slice_cols(ks, hh * dh, dh)?;
                    let vh = g.slice_cols(vs, hh * dh, dh)?;
                    let sc = g.matmul_nt(qh, kh)?;
                    let sc = g.scale(sc, inv_sqrt);
                    let p = g.causal_softmax(sc)?;
                    per_head.push(g.matmul(p, vh)?);
                }
                outs.push(if heads_n == 1 { per_head[0] } else { g.concat_cols(per_head)? });
            }
            let att = if outs.len() == 1 { outs[0] } else { g.concat_rows(outs)? };
            let att = g.matmul(att, wo)?;
            x = g.add(x, att)?;

            let h2 = norm(g, binder, x, &block.ffn_norm, stage)?;
            ffn_inputs.push(h2);
            let out = match &block.ffn {
                FeedForward::Dense(ffn) => {
                    moe.push(None);
                    ffn.forward_graph(g, binder, h2, ParamGroup::Dense.trainable_in(stage))?
                }
                FeedForward::Moe(layer) => {
                    let trainable = LayerTrainable {
                        gating: ParamGroup::Gating.trainable_in(stage),
                        experts: ParamGroup::Expert.trainable_in(stage),
                    };
                    let o = moe_forward_graph(g, binder, h2, &tags, &layer.experts, &layer.gating, &layer.record, trainable)?;
                    let y = o.y;
                    moe.push(Some(o));
                    y
                }
            };
            x = g.add(x, out)?;
        }
        let hf = norm(g, binder, x, &self.heads.norm, stage)?;

        let mut heads = Vec::new();
        for (kind, param) in [
            (HeadKind::Time, &self.heads.time),
            (HeadKind::Score, &self.heads.score),
            (HeadKind::Text, &self.heads.text),
        ] {
            let mut rows = Vec::new();
            let mut idx = Vec::new();
            for (si, s) in seqs.iter().enumerate() {
                let base = ranges[si].start + s.first_prediction() + s.predict_offset;
                for (j, &h) in s.predict.iter().enumerate() {
                    if h == kind {
                        rows.push((si, j));
                        idx.push(base + j);
                    }
                }
            }
            if idx.is_empty() {
                continue;
            }
            let w = bind(g, binder, param, ParamGroup::Head, stage);
            let sel = g.gather_rows(hf, idx)?;
            let logits = g.matmul(sel, w)?;
            heads.push(HeadLogits { head: kind, logits, rows });
        }
        Ok(Forward {
            heads,
            moe,
            ffn_inputs,
            tags,
        })
    }

    /// Logits of every predicted position of one sequence, in order.
    pub fn forward(&self, seq: &SeqInput) -> Result<Vec<PositionLogits>> {
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let f = self.forward_graph(&mut g, &mut binder, std::slice::from_ref(seq), 0)?;
        let mut out: Vec<Option<PositionLogits>> = vec![None; seq.predict.len()];
        let first = seq.first_prediction() + seq.predict_offset;
        for h in &f.heads {
            let m = g.value(h.logits);
            for (r, &(_, j)) in h.rows.iter().enumerate() {
                out[j] = Some(PositionLogits {
                    position: first + j,
                    head: h.head,
                    logits: m.row(r).to_vec(),
                });
            }
        }
        Ok(out.into_iter().map(|p| p.expect("every prediction has a head")).collect())
    }
}

/// Routing of one sequence through every block.
#[derive(Debug, Clone)]
pub struct RoutingTrace {
    pub tags: Vec<TaskType>,
    /// Per block: routing decisions and feed-forward inputs (`None` for
    /// dense blocks).
    pub layers: Vec<Option<(Vec<RoutingDecision>, Matrix)>>,
}

impl RoutingTrace {
    /// (active expert count summed over tokens and MoE blocks, token-block pairs).
    pub fn activation_totals(&self) -> (usize, usize) {
        self.layers.iter().flatten().fold((0, 0), |(a, n), (d, _)| {
            (a + d.iter().map(|r| r.active.len()).sum::<usize>(), n + d.len())
        })
    }
}

impl Model {
    pub fn routing_trace(&self, seq: &SeqInput) -> Result<RoutingTrace> {
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let f = self.forward_graph(&mut g, &mut binder, std::slice::from_ref(seq), 0)?;
        let layers = f
            .moe
            .into_iter()
            .zip(&f.ffn_inputs)
            .map(|(m, &x)| m.map(|m| (m.decisions, g.value(x).clone())))
            .collect();
        Ok(RoutingTrace { tags: f.tags, layers })
    }
}
