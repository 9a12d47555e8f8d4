use crate::error::{Error, Result};
use crate::event_codec::{
    decode_events, encode_events, EventSequence, GrammarState, HeadKind, TaskType, Token, TokenId, TokenStream, EOS,
};
use crate::numerics::Matrix;

use super::{Model, SeqInput};

/// Result of greedy decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput {
    pub events: EventSequence,
    /// Every token the decoder emitted, including events later discarded.
    pub raw: Vec<TokenId>,
    /// Events dropped because they were unordered or overlapped a kept one.
    pub discarded: usize,
    /// The token budget ran out before EOS.
    pub truncated: bool,
}

impl Model {
    /// Greedy decoding of at most `max_events` events under the event
    /// grammar. Always yields a valid sequence.
    pub fn generate(&self, frames: &Matrix, timestamps: &[f64], query: &[TokenId], max_events: usize) -> Result<EventSequence> {
        Ok(self.generate_full(frames, timestamps, query, max_events)?.events)
    }

    pub fn generate_full(
        &self,
        frames: &Matrix,
        timestamps: &[f64],
        query: &[TokenId],
        max_events: usize,
    ) -> Result<GenerationOutput> {
        if max_events == 0 {
            return Err(Error::contract("generate needs max_events >= 1"));
        }
        let cfg = &self.config;
        let mut ids: Vec<TokenId> = Vec::new();
        let mut heads: Vec<HeadKind> = Vec::new();
        let mut tags: Vec<TaskType> = Vec::new();
        let mut state = GrammarState::EventStart;
        let mut kept = EventSequence::empty();
        let mut event_from = 0;
        let mut discarded = 0;
        let mut truncated = false;
        loop {
            if state == GrammarState::EventStart {
                event_from = ids.len();
                if kept.len() == max_events {
                    break;
                }
            }
            // keep one slot for EOS
            if ids.len() + 1 >= cfg.max_target {
                truncated = true;
                break;
            }
            let head = state.head();
            let seq = SeqInput {
                frames,
                timestamps,
                saliency: None,
                query,
                inputs: ids.clone(),
                input_heads: heads.clone(),
                input_tags: tags.clone(),
                predict: vec![head],
                predict_offset: ids.len(),
            };
            let logits = self.forward(&seq)?.pop().expect("one prediction").logits;
            let mut best: Option<(usize, f64)> = None;
            for (i, &l) in logits.iter().enumerate() {
                if state.accepts(cfg.head_token(head, i)) && best.map_or(true, |(_, b)| l > b) {
                    best = Some((i, l));
                }
            }
            let (index, _) = best.ok_or_else(|| Error::Generation(format!("no legal token in state {state:?}")))?;
            let id = cfg.head_token(head, index);
            let (tag, next) = state.advance(id).expect("masked to legal tokens");
            ids.push(id);
            heads.push(head);
            tags.push(tag);
            state = next;
            if state == GrammarState::Done {
                break;
            }
            if state == GrammarState::EventStart {
                let mut tokens: Vec<Token> = ids[event_from..]
                    .iter()
                    .zip(&tags[event_from..])
                    .map(|(&id, &tag)| Token { id, tag })
                    .collect();
                tokens.push(Token { id: EOS, tag: TaskType::Eos });
                match decode_events(&TokenStream { tokens }) {
                    Ok(one) => {
                        let ev = one.events.into_iter().next().expect("one event");
                        if kept.events.last().map_or(true, |last| ev.start >= last.end) {
                            kept.events.push(ev);
                        } else {
                            discarded += 1;
                        }
                    }
                    Err(_) => discarded += 1,
                }
            }
        }
        // Re-encode the kept events so the result provably parses.
        let events = decode_events(&encode_events(&kept))?;
        Ok(GenerationOutput {
            events,
            raw: ids,
            discarded,
            truncated,
        })
    }
}
