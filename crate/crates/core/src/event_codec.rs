//! Event triplets and their interleaved number/separator/text token form.
//!
//! Token id table (fixed, also written into checkpoints):
//!
//! | id    | token        |
//! |-------|--------------|
//! | 0-9   | digits       |
//! | 10    | `.`          |
//! | 11    | `<sep>`      |
//! | 12    | `<sync>`     |
//! | 13    | EOS          |
//! | 14+   | text vocab   |
//!
//! One event encodes as
//! `TIME(start) <sep> TIME(end) <sync> SCORE <sync> TEXT… <sync>`, events are
//! concatenated and the stream ends with EOS.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const DOT: TokenId = 10;
pub const SEP: TokenId = 11;
pub const SYNC: TokenId = 12;
pub const EOS: TokenId = 13;
/// Number of reserved ids; text vocabulary starts here.
pub const TEXT_BASE: TokenId = 14;
pub const MAX_SALIENCY: u8 = 4;
const MAX_INT_DIGITS: usize = 6;

/// Category of a token. `Visual` never appears in a [`TokenStream`]; it
/// tags fused frame positions for routing statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskType {
    Time,
    Score,
    Text,
    Sep,
    Sync,
    Eos,
    Visual,
}

impl TaskType {
    pub const ALL: [TaskType; 7] = [
        TaskType::Time,
        TaskType::Score,
        TaskType::Text,
        TaskType::Sep,
        TaskType::Sync,
        TaskType::Eos,
        TaskType::Visual,
    ];
    pub const COUNT: usize = Self::ALL.len();

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskType::Time => "TIME",
            TaskType::Score => "SCORE",
            TaskType::Text => "TEXT",
            TaskType::Sep => "SEP",
            TaskType::Sync => "SYNC",
            TaskType::Eos => "EOS",
            TaskType::Visual => "VISUAL",
        }
    }

    /// Timestamp and score tokens.
    pub fn is_task_token(self) -> bool {
        matches!(self, TaskType::Time | TaskType::Score)
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A timestamp in tenths of a second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp(u32);

impl Timestamp {
    pub fn from_tenths(tenths: u32) -> Self {
        Timestamp(tenths)
    }

    /// Accepts non-negative values that are exact at one decimal.
    pub fn from_secs(secs: f64) -> Result<Self> {
        if !secs.is_finite() || secs < 0.0 {
            return Err(Error::Domain(format!("time {secs} must be finite and >= 0")));
        }
        let tenths = (secs * 10.0).round();
        if (tenths / 10.0 - secs).abs() > 1e-9 || tenths > u32::MAX as f64 {
            return Err(Error::Domain(format!("time {secs} is not representable at one decimal")));
        }
        Ok(Timestamp(tenths as u32))
    }

    pub fn tenths(self) -> u32 {
        self.0
    }

    pub fn secs(self) -> f64 {
        f64::from(self.0) / 10.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub start: Timestamp,
    pub end: Timestamp,
    pub saliency: u8,
    pub caption: Vec<TokenId>,
}

impl Event {
    pub fn new(start_s: f64, end_s: f64, saliency: u8, caption: Vec<TokenId>) -> Result<Self> {
        let event = Event {
            start: Timestamp::from_secs(start_s)?,
            end: Timestamp::from_secs(end_s)?,
            saliency,
            caption,
        };
        event.validate()?;
        Ok(event)
    }

    pub fn start_s(&self) -> f64 {
        self.start.secs()
    }

    pub fn end_s(&self) -> f64 {
        self.end.secs()
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.start_s(), self.end_s())
    }

    pub fn validate(&self) -> Result<()> {
        if self.start >= self.end {
            return Err(Error::Domain(format!(
                "event start {} must precede end {}",
                self.start_s(),
                self.end_s()
            )));
        }
        if self.saliency > MAX_SALIENCY {
            return Err(Error::Domain(format!("saliency {} outside 0..=4", self.saliency)));
        }
        if self.caption.is_empty() {
            return Err(Error::Domain("caption must be nonempty".into()));
        }
        if let Some(t) = self.caption.iter().find(|&&t| t < TEXT_BASE) {
            return Err(Error::Domain(format!("caption contains reserved token {t}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSequence {
    pub events: Vec<Event>,
}

impl EventSequence {
    pub fn new(events: Vec<Event>) -> Result<Self> {
        let seq = EventSequence { events };
        seq.validate()?;
        Ok(seq)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.events {
            e.validate()?;
        }
        for pair in self.events.windows(2) {
            if pair[1].start < pair[0].end {
                return Err(Error::Domain(format!(
                    "events [{}, {}] and [{}, {}] are unsorted or overlap",
                    pair[0].start_s(),
                    pair[0].end_s(),
                    pair[1].start_s(),
                    pair[1].end_s()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: TokenId,
    pub tag: TaskType,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub tokens: Vec<Token>,
}

impl TokenStream {
    pub fn ids(&self) -> Vec<TokenId> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn tags(&self) -> Vec<TaskType> {
        self.tokens.iter().map(|t| t.tag).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn push(&mut self, id: TokenId, tag: TaskType) {
        self.tokens.push(Token { id, tag });
    }
}

impl fmt::Display for TokenStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for t in &self.tokens {
            if !first {
                f.write_str(" ")?;
            }
            first = false;
            match t.id {
                0..=9 => write!(f, "{}", t.id)?,
                DOT => f.write_str(".")?,
                SEP => f.write_str("<sep>")?,
                SYNC => f.write_str("<sync>")?,
                EOS => f.write_str("EOS")?,
                id => write!(f, "w{}", id - TEXT_BASE)?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumberKind {
    Time,
    Score,
}

/// Renders a timestamp (`12.5` → `1 2 . 5`) or an integer score as number tokens.
pub fn format_number(value: f64, kind: NumberKind) -> Result<Vec<TokenId>> {
    match kind {
        NumberKind::Time => Ok(format_time(Timestamp::from_secs(value)?)),
        NumberKind::Score => {
            if value.fract() != 0.0 || !(0.0..=f64::from(MAX_SALIENCY)).contains(&value) {
                return Err(Error::Domain(format!("score {value} outside integer range 0..=4")));
            }
            Ok(vec![value as TokenId])
        }
    }
}

pub fn format_time(t: Timestamp) -> Vec<TokenId> {
    let int = t.tenths() / 10;
    let frac = t.tenths() % 10;
    let mut out: Vec<TokenId> = int.to_string().bytes().map(|b| TokenId::from(b - b'0')).collect();
    out.push(DOT);
    out.push(frac);
    out
}

pub fn encode_events(seq: &EventSequence) -> TokenStream {
    let mut s = TokenStream::default();
    for e in &seq.events {
        for id in format_time(e.start) {
            s.push(id, TaskType::Time);
        }
        s.push(SEP, TaskType::Sep);
        for id in format_time(e.end) {
            s.push(id, TaskType::Time);
        }
        s.push(SYNC, TaskType::Sync);
        s.push(TokenId::from(e.saliency), TaskType::Score);
        s.push(SYNC, TaskType::Sync);
        for &c in &e.caption {
            s.push(c, TaskType::Text);
        }
        s.push(SYNC, TaskType::Sync);
    }
    s.push(EOS, TaskType::Eos);
    s
}

/// What the grammar wanted at the failing position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expected {
    DigitOrEos,
    Digit,
    DigitOrDot,
    Dot,
    Sep,
    Sync,
    ScoreDigit,
    Text,
    TextOrSync,
    End,
    /// Token matched the grammar but carried the wrong tag.
    Tag(TaskType),
    /// start < end violated by the event completed here.
    OrderedInterval,
    /// Event starts before the previous one ends.
    NonOverlapping,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at token {index}: expected {expected:?}, found {found:?}")]
pub struct ParseError {
    pub index: usize,
    pub expected: Expected,
    pub found: Option<TokenId>,
}

/// Which half of an interval a timestamp belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Start,
    End,
}

/// Output head responsible for a grammar position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Time,
    Score,
    Text,
}

/// Position in the event grammar, i.e. what the next token may be.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrammarState {
    /// Start of an event (first digit of its start time) or EOS.
    EventStart,
    /// First digit of the end time.
    EndBegin,
    /// Inside the integer part; `zero` when it is a lone leading `0`.
    Int { bound: Bound, digits: usize, zero: bool },
    /// After the dot, one fractional digit.
    Frac(Bound),
    /// Number complete, expecting `<sep>` (start) or `<sync>` (end).
    AfterNumber(Bound),
    Score,
    AfterScore,
    Caption { len: usize },
    Done,
}

impl GrammarState {
    pub fn head(self) -> HeadKind {
        match self {
            GrammarState::Score | GrammarState::AfterScore => HeadKind::Score,
            GrammarState::Caption { .. } => HeadKind::Text,
            _ => HeadKind::Time,
        }
    }

    /// True when `id` may come next.
    pub fn accepts(self, id: TokenId) -> bool {
        self.advance(id).is_ok()
    }

    pub fn expected(self) -> Expected {
        match self {
            GrammarState::EventStart => Expected::DigitOrEos,
            GrammarState::EndBegin | GrammarState::Frac(_) => Expected::Digit,
            GrammarState::Int { zero: true, .. } => Expected::Dot,
            GrammarState::Int { digits, .. } if digits >= MAX_INT_DIGITS => Expected::Dot,
            GrammarState::Int { .. } => Expected::DigitOrDot,
            GrammarState::AfterNumber(Bound::Start) => Expected::Sep,
            GrammarState::AfterNumber(Bound::End) | GrammarState::AfterScore => Expected::Sync,
            GrammarState::Score => Expected::ScoreDigit,
            GrammarState::Caption { len: 0 } => Expected::Text,
            GrammarState::Caption { .. } => Expected::TextOrSync,
            GrammarState::Done => Expected::End,
        }
    }

    /// Consumes one token, returning the tag it must carry and the next state.
    pub fn advance(self, id: TokenId) -> std::result::Result<(TaskType, GrammarState), Expected> {
        use GrammarState as G;
        let digit = id <= 9;
        let next = match (self, id) {
            (G::EventStart, EOS) => (TaskType::Eos, G::Done),
            (G::EventStart, _) if digit => (
                TaskType::Time,
                G::Int { bound: Bound::Start, digits: 1, zero: id == 0 },
            ),
            (G::EndBegin, _) if digit => (
                TaskType::Time,
                G::Int { bound: Bound::End, digits: 1, zero: id == 0 },
            ),
            (G::Int { bound, .. }, DOT) => (TaskType::Time, G::Frac(bound)),
            (G::Int { bound, digits, zero: false }, _) if digit && digits < MAX_INT_DIGITS => (
                TaskType::Time,
                G::Int { bound, digits: digits + 1, zero: false },
            ),
            (G::Frac(bound), _) if digit => (TaskType::Time, G::AfterNumber(bound)),
            (G::AfterNumber(Bound::Start), SEP) => (TaskType::Sep, G::EndBegin),
            (G::AfterNumber(Bound::End), SYNC) => (TaskType::Sync, G::Score),
            (G::Score, _) if id <= TokenId::from(MAX_SALIENCY) => (TaskType::Score, G::AfterScore),
            (G::AfterScore, SYNC) => (TaskType::Sync, G::Caption { len: 0 }),
            (G::Caption { len }, _) if id >= TEXT_BASE => {
                (TaskType::Text, G::Caption { len: len + 1 })
            }
            (G::Caption { len }, SYNC) if len > 0 => (TaskType::Sync, G::EventStart),
            _ => return Err(self.expected()),
        };
        Ok(next)
    }
}

/// Re-derives the tag of every token from ids alone.
pub fn derive_tags(ids: &[TokenId]) -> std::result::Result<Vec<TaskType>, ParseError> {
    let mut state = GrammarState::EventStart;
    let mut tags = Vec::with_capacity(ids.len());
    for (index, &id) in ids.iter().enumerate() {
        let (tag, next) = state.advance(id).map_err(|expected| ParseError {
            index,
            expected,
            found: Some(id),
        })?;
        tags.push(tag);
        state = next;
    }
    Ok(tags)
}

#[derive(Default)]
struct PartialEvent {
    start: u32,
    end: u32,
    number: u32,
    saliency: u8,
    caption: Vec<TokenId>,
    start_index: usize,
}

pub fn decode_events(stream: &TokenStream) -> std::result::Result<EventSequence, ParseError> {
    let mut state = GrammarState::EventStart;
    let mut events: Vec<Event> = Vec::new();
    let mut cur = PartialEvent::default();
    for (index, tok) in stream.tokens.iter().enumerate() {
        let err = |expected| ParseError {
            index,
            expected,
            found: Some(tok.id),
        };
        let (tag, next) = state.advance(tok.id).map_err(err)?;
        if tag != tok.tag {
            return Err(err(Expected::Tag(tag)));
        }
        match (state, next) {
            (GrammarState::EventStart, GrammarState::Int { .. }) => {
                cur = PartialEvent {
                    number: tok.id,
                    start_index: index,
                    ..PartialEvent::default()
                };
            }
            (GrammarState::EndBegin, _) => cur.number = tok.id,
            (GrammarState::Int { .. }, GrammarState::Int { .. }) => {
                cur.number = cur.number * 10 + tok.id;
            }
            (GrammarState::Frac(Bound::Start), _) => cur.start = cur.number * 10 + tok.id,
            (GrammarState::Frac(Bound::End), _) => {
                cur.end = cur.number * 10 + tok.id;
                if cur.start >= cur.end {
                    return Err(err(Expected::OrderedInterval));
                }
                if let Some(prev) = events.last() {
                    if cur.start < prev.end.tenths() {
                        return Err(ParseError {
                            index: cur.start_index,
                            expected: Expected::NonOverlapping,
                            found: Some(stream.tokens[cur.start_index].id),
                        });
                    }
                }
            }
            (GrammarState::Score, _) => cur.saliency = tok.id as u8,
            (GrammarState::Caption { .. }, GrammarState::Caption { .. }) => cur.caption.push(tok.id),
            (GrammarState::Caption { .. }, GrammarState::EventStart) => {
                let done = std::mem::take(&mut cur);
                events.push(Event {
                    start: Timestamp(done.start),
                    end: Timestamp(done.end),
                    saliency: done.saliency,
                    caption: done.caption,
                });
            }
            _ => {}
        }
        state = next;
        if state == GrammarState::Done && index + 1 < stream.tokens.len() {
            return Err(ParseError {
                index: index + 1,
                expected: Expected::End,
                found: Some(stream.tokens[index + 1].id),
            });
        }
    }
    if state != GrammarState::Done {
        return Err(ParseError {
            index: stream.tokens.len(),
            expected: state.expected(),
            found: None,
        });
    }
    Ok(EventSequence { events })
}
