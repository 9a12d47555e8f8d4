//! Procedural moment-retrieval, dense-captioning and highlight samples.
//!
//! A video is `T` one-second frames. Events are disjoint intervals on a
//! half-second grid, each showing one class; a frame is the coverage-weighted
//! blend of the class prototypes (and the background prototype) over its
//! second, plus isotropic Gaussian noise of stdev `σ/√d` per coordinate.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::event_codec::{encode_events, Event, EventSequence, Timestamp, TokenId, MAX_SALIENCY, TEXT_BASE};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskKind {
    Mr,
    Dvc,
    Vhd,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Mr, TaskKind::Dvc, TaskKind::Vhd];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Mr => "MR",
            TaskKind::Dvc => "DVC",
            TaskKind::Vhd => "VHD",
        }
    }

    fn marker(self) -> usize {
        match self {
            TaskKind::Mr => 0,
            TaskKind::Dvc => 1,
            TaskKind::Vhd => 2,
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Local text ids (offset by [`TEXT_BASE`] in streams): three task markers,
/// an "all events" token, one query token per class, then two caption
/// tokens per class.
const ALL_TOKEN: usize = 3;
const CLASS_BASE: usize = 4;
const CAPTION_LEN: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub frames: usize,
    /// Frame embedding width; must equal the model width.
    pub dim: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub noise: f64,
    /// Timestamp grid in seconds.
    pub grid: f64,
    /// Shortest and longest event, in seconds.
    pub min_duration: f64,
    pub max_duration: f64,
    /// Saliency per class, 0..=4.
    pub saliency: Vec<u8>,
    pub text_vocab: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 6,
            frames: 32,
            dim: 64,
            min_events: 1,
            max_events: 3,
            noise: 0.3,
            grid: 0.5,
            min_duration: 2.0,
            max_duration: 10.0,
            saliency: vec![1, 4, 2, 0, 3, 1],
            text_vocab: 64,
            train_size: 300,
            val_size: 60,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes == 0 || self.n_classes * 4 > self.text_vocab {
            return bad(format!(
                "data.n_classes {} must be in 1..={} for a text vocabulary of {}",
                self.n_classes,
                self.text_vocab / 4,
                self.text_vocab
            ));
        }
        if CLASS_BASE + self.n_classes * (1 + CAPTION_LEN) > self.text_vocab {
            return bad("data: text vocabulary too small for class and caption tokens".into());
        }
        if self.saliency.len() != self.n_classes || self.saliency.iter().any(|&s| s > MAX_SALIENCY) {
            return bad(format!("data.saliency needs {} entries in 0..=4", self.n_classes));
        }
        if self.frames == 0 || self.dim == 0 {
            return bad("data.frames and data.dim must be >= 1".into());
        }
        if self.min_events == 0 || self.min_events > self.max_events || self.max_events > self.n_classes {
            return bad(format!(
                "data events need 1 <= min_events <= max_events <= n_classes, got {}..{}",
                self.min_events, self.max_events
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("data.noise must be finite and >= 0".into());
        }
        if !(self.grid > 0.0) || (self.grid * 10.0).fract() != 0.0 {
            return bad("data.grid must be a positive multiple of 0.1 s".into());
        }
        if !(self.min_duration >= self.grid && self.min_duration <= self.max_duration) {
            return bad("data durations need grid <= min_duration <= max_duration".into());
        }
        if self.train_size == 0 {
            return bad("data.train_size must be >= 1".into());
        }
        Ok(())
    }

    /// Local text id of the query token naming `class`.
    pub fn class_token(&self, class: usize) -> usize {
        CLASS_BASE + class
    }

    /// Caption (stream token ids) of `class`.
    pub fn caption(&self, class: usize) -> Vec<TokenId> {
        let base = CLASS_BASE + self.n_classes + class * CAPTION_LEN;
        (0..CAPTION_LEN).map(|i| (TEXT_BASE as usize + base + i) as TokenId).collect()
    }

    fn grid_units(&self, secs: f64) -> usize {
        (secs / self.grid + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub seed: u64,
    pub kind: TaskKind,
    /// T×d frame embeddings.
    pub frames: Matrix,
    pub frame_timestamps: Vec<f64>,
    /// Stream token ids: task marker then class (or "all") token.
    pub query: Vec<TokenId>,
    pub gold: EventSequence,
    /// Class of every event in the video, in time order.
    pub classes: Vec<usize>,
}

/// Unit prototype for class `index` (`n_classes` is the background); depends
/// only on the index and width.
pub fn prototype(index: usize, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(format!("expertflow/prototype/{index}").as_bytes());
    let mut key = [0u8; 8];
    key.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(key));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn text_id(local: usize) -> TokenId {
    (TEXT_BASE as usize + local) as TokenId
}

/// Draws `m` disjoint intervals (grid units) with durations in `[lo, hi]`.
fn draw_intervals<R: Rng>(rng: &mut R, m: usize, total: usize, lo: usize, hi: usize) -> Vec<(usize, usize)> {
    let hi = hi.min(total / m).max(lo);
    let durations: Vec<usize> = (0..m).map(|_| rng.gen_range(lo..=hi)).collect();
    let slack = total - durations.iter().sum::<usize>();
    let mut cuts: Vec<usize> = (0..m).map(|_| rng.gen_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(m);
    let mut pos = 0;
    let mut prev_cut = 0;
    for (k, &d) in durations.iter().enumerate() {
        pos += cuts[k] - prev_cut;
        prev_cut = cuts[k];
        out.push((pos, pos + d));
        pos += d;
    }
    out
}

/// One sample, fully determined by `(cfg, kind, seed)`.
pub fn gen_sample(cfg: &SynthConfig, kind: TaskKind, seed: u64) -> Result<SyntheticSample> {
    cfg.validate()?;
    let total = cfg.grid_units(cfg.frames as f64);
    let lo = cfg.grid_units(cfg.min_duration);
    let hi = cfg.grid_units(cfg.max_duration);
    if cfg.max_events * lo > total {
        return Err(Error::Generation(format!(
            "{} events of at least {} s do not fit in {} s",
            cfg.max_events, cfg.min_duration, cfg.frames
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(cfg.min_events..=cfg.max_events);
    let intervals = draw_intervals(&mut rng, m, total, lo, hi);
    let mut pool: Vec<usize> = (0..cfg.n_classes).collect();
    pool.shuffle(&mut rng);
    let classes: Vec<usize> = pool[..m].to_vec();

    let tenths_per_unit = (cfg.grid * 10.0).round() as u32;
    let events: Vec<Event> = intervals
        .iter()
        .zip(&classes)
        .map(|(&(s, e), &c)| {
            let event = Event {
                start: Timestamp::from_tenths(s as u32 * tenths_per_unit),
                end: Timestamp::from_tenths(e as u32 * tenths_per_unit),
                saliency: cfg.saliency[c],
                caption: cfg.caption(c),
            };
            event.validate().map(|_| event)
        })
        .collect::<Result<_>>()?;

    let protos: Vec<Vec<f64>> = (0..=cfg.n_classes).map(|c| prototype(c, cfg.dim)).collect();
    // noise has expected norm ≈ σ regardless of width
    let per_coord = cfg.noise / (cfg.dim as f64).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut frames = Matrix::zeros(cfg.frames, cfg.dim);
    for i in 0..cfg.frames {
        let (a, b) = (i as f64, i as f64 + 1.0);
        let mut covered = 0.0;
        let row = frames.row_mut(i);
        for (ev, &c) in events.iter().zip(&classes) {
            let overlap = (b.min(ev.end_s()) - a.max(ev.start_s())).max(0.0);
            if overlap > 0.0 {
                covered += overlap;
                for (r, p) in row.iter_mut().zip(&protos[c]) {
                    *r += overlap * p;
                }
            }
        }
        let bg = 1.0 - covered;
        if bg > 0.0 {
            for (r, p) in row.iter_mut().zip(&protos[cfg.n_classes]) {
                *r += bg * p;
            }
        }
        for r in row.iter_mut() {
            *r += per_coord * normal.sample(&mut rng);
        }
    }

    let (query, gold) = match kind {
        TaskKind::Mr => {
            let pick = rng.gen_range(0..m);
            let q = vec![text_id(kind.marker()), text_id(cfg.class_token(classes[pick]))];
            (q, EventSequence::new(vec![events[pick].clone()])?)
        }
        TaskKind::Dvc | TaskKind::Vhd => {
            let q = vec![text_id(kind.marker()), text_id(ALL_TOKEN)];
            (q, EventSequence::new(events)?)
        }
    };
    Ok(SyntheticSample {
        seed,
        kind,
        frames,
        frame_timestamps: (0..cfg.frames).map(|i| i as f64).collect(),
        query,
        gold,
        classes,
    })
}

/// `n` samples with seeds `base..base+n` and task kinds round-robin MR, DVC, VHD.
pub fn gen_split(cfg: &SynthConfig, n: usize, base: u64) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::contract("gen_split needs n >= 1"));
    }
    (0..n)
        .map(|i| gen_sample(cfg, TaskKind::ALL[i % 3], base + i as u64))
        .collect()
}

/// First seed of the validation split; train seeds are `seed..seed+train_size`.
pub fn val_base_seed(cfg: &SynthConfig) -> u64 {
    cfg.seed.wrapping_add(1 << 32)
}

pub fn train_split(cfg: &SynthConfig) -> Result<Vec<SyntheticSample>> {
    gen_split(cfg, cfg.train_size, cfg.seed)
}

pub fn val_split(cfg: &SynthConfig) -> Result<Vec<SyntheticSample>> {
    gen_split(cfg, cfg.val_size.max(1), val_base_seed(cfg))
}

fn f64s_to_b64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

#[derive(Serialize)]
struct DumpRecord<'a> {
    seed: u64,
    kind: TaskKind,
    frames_shape: [usize; 2],
    frames: String,
    frame_timestamps: String,
    query: &'a [TokenId],
    gold: Vec<TokenId>,
}

/// One JSON record per line; float arrays are base64 little-endian f64.
pub fn dump_dataset(samples: &[SyntheticSample]) -> String {
    let mut out = String::new();
    for s in samples {
        let rec = DumpRecord {
            seed: s.seed,
            kind: s.kind,
            frames_shape: [s.frames.rows(), s.frames.cols()],
            frames: f64s_to_b64(s.frames.data()),
            frame_timestamps: f64s_to_b64(&s.frame_timestamps),
            query: &s.query,
            gold: encode_events(&s.gold).ids(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("dump record serializes"));
        out.push('\n');
    }
    out
}

/// Hex SHA-256 of a sample's dump record.
pub fn sample_digest(sample: &SyntheticSample) -> String {
    hex::encode(Sha256::digest(dump_dataset(std::slice::from_ref(sample)).as_bytes()))
}
