//! Temporal grounding metrics and the evaluation harness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_codec::{encode_events, EventSequence};
use crate::model::{Model, SeqInput};
use crate::synthdata::{SyntheticSample, TaskKind};

/// Closed time interval `(start, end)` in seconds.
pub type Interval = (f64, f64);

pub const DVC_THRESHOLDS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];
pub const MAP_THRESHOLDS: [f64; 2] = [0.5, 0.75];
/// IoU a caption pair must reach before its tokens are compared.
pub const CAPTION_MATCH_IOU: f64 = 0.5;

/// Interval with a ranking score (predicted or gold saliency).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub interval: Interval,
    pub score: f64,
}

fn check_interval(a: Interval) -> Result<()> {
    if a.0.is_finite() && a.1.is_finite() && a.0 < a.1 {
        Ok(())
    } else {
        Err(Error::contract(format!("degenerate interval [{}, {}]", a.0, a.1)))
    }
}

pub fn temporal_iou(a: Interval, b: Interval) -> Result<f64> {
    check_interval(a)?;
    check_interval(b)?;
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    Ok(inter / union)
}

/// Fraction of samples whose top-1 prediction reaches IoU `tau` with the
/// gold interval, and the mean IoU. A missing prediction scores IoU 0.
pub fn recall_at_iou(preds: &[Option<Interval>], golds: &[Interval], tau: f64) -> Result<(f64, f64)> {
    if preds.len() != golds.len() {
        return Err(Error::contract(format!("{} predictions for {} golds", preds.len(), golds.len())));
    }
    if golds.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut hits = 0usize;
    let mut iou_sum = 0.0;
    for (p, &g) in preds.iter().zip(golds) {
        let iou = match p {
            Some(p) => temporal_iou(*p, g)?,
            None => {
                check_interval(g)?;
                0.0
            }
        };
        if iou >= tau {
            hits += 1;
        }
        iou_sum += iou;
    }
    let n = golds.len() as f64;
    Ok((hits as f64 / n, iou_sum / n))
}

/// One-to-one matching taking pairs in descending IoU order (ties: lower
/// prediction index, then lower gold index) while both sides are free.
pub fn greedy_matches(preds: &[Interval], golds: &[Interval], tau: f64) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    for (i, &p) in preds.iter().enumerate() {
        for (j, &g) in golds.iter().enumerate() {
            let iou = temporal_iou(p, g)?;
            if iou >= tau {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; preds.len()];
    let mut gold_used = vec![false; golds.len()];
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if !pred_used[i] && !gold_used[j] {
            pred_used[i] = true;
            gold_used[j] = true;
            out.push((i, j));
        }
    }
    Ok(out)
}

fn f1_at(preds: &[Interval], golds: &[Interval], tau: f64) -> Result<f64> {
    if preds.is_empty() && golds.is_empty() {
        return Ok(1.0);
    }
    let m = greedy_matches(preds, golds, tau)?.len() as f64;
    let precision = if preds.is_empty() { 0.0 } else { m / preds.len() as f64 };
    let recall = if golds.is_empty() { 0.0 } else { m / golds.len() as f64 };
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Localization F1 averaged over [`DVC_THRESHOLDS`].
pub fn dvc_f1_intervals(preds: &[Interval], golds: &[Interval]) -> Result<f64> {
    let mut sum = 0.0;
    for tau in DVC_THRESHOLDS {
        sum += f1_at(preds, golds, tau)?;
    }
    Ok(sum / DVC_THRESHOLDS.len() as f64)
}

pub fn dvc_f1(preds: &EventSequence, golds: &EventSequence) -> Result<f64> {
    dvc_f1_intervals(&intervals(preds), &intervals(golds))
}

pub fn intervals(seq: &EventSequence) -> Vec<Interval> {
    seq.events.iter().map(|e| (e.start_s(), e.end_s())).collect()
}

pub fn scored(seq: &EventSequence) -> Vec<Scored> {
    seq.events
        .iter()
        .map(|e| Scored {
            interval: (e.start_s(), e.end_s()),
            score: e.saliency as f64,
        })
        .collect()
}

/// Prediction indices by descending score, ties to the earlier start.
pub fn ranking(preds: &[Scored]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .total_cmp(&preds[a].score)
            .then(preds[a].interval.0.total_cmp(&preds[b].interval.0))
            .then(a.cmp(&b))
    });
    order
}

/// Average precision at one IoU threshold. Each prediction, in rank order,
/// claims the free gold it overlaps most (ties to the lower index).
pub fn average_precision(preds: &[Scored], golds: &[Interval], tau: f64) -> Result<f64> {
    if golds.is_empty() {
        return Ok(if preds.is_empty() { 1.0 } else { 0.0 });
    }
    let mut used = vec![false; golds.len()];
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, i) in ranking(preds).into_iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, &g) in golds.iter().enumerate() {
            let iou = temporal_iou(preds[i].interval, g)?;
            if !used[j] && iou >= tau && best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / golds.len() as f64)
}

pub fn highlight_map(preds: &[Scored], golds: &[Interval], thresholds: &[f64]) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::contract("highlight_map needs at least one threshold"));
    }
    let mut sum = 0.0;
    for &tau in thresholds {
        sum += average_precision(preds, golds, tau)?;
    }
    Ok(sum / thresholds.len() as f64)
}

/// 1 when the top-ranked prediction reaches IoU 0.5 with a gold event of
/// maximal saliency, else 0.
pub fn hit_at_1(preds: &[Scored], golds: &[Scored]) -> Result<f64> {
    let Some(&top) = ranking(preds).first() else {
        return Ok(0.0);
    };
    let best = golds.iter().map(|g| g.score).fold(f64::NEG_INFINITY, f64::max);
    for g in golds.iter().filter(|g| g.score == best) {
        if temporal_iou(preds[top].interval, g.interval)? >= 0.5 {
            return Ok(1.0);
        }
    }
    Ok(0.0)
}

/// Exact caption token agreement over pairs matched at
/// [`CAPTION_MATCH_IOU`]: (equal positions, compared positions).
pub fn caption_token_counts(preds: &EventSequence, golds: &EventSequence) -> Result<(usize, usize)> {
    let matches = greedy_matches(&intervals(preds), &intervals(golds), CAPTION_MATCH_IOU)?;
    let mut correct = 0;
    let mut total = 0;
    for (i, j) in matches {
        let p = &preds.events[i].caption;
        let g = &golds.events[j].caption;
        correct += p.iter().zip(g).filter(|(a, b)| a == b).count();
        total += p.len().max(g.len());
    }
    Ok((correct, total))
}

/// Metrics for one task kind. Metrics that do not apply to the kind are
/// `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindReport {
    pub kind: TaskKind,
    pub count: usize,
    pub r1_iou50: Option<f64>,
    pub r1_iou70: Option<f64>,
    pub mean_iou: Option<f64>,
    pub dvc_f1: Option<f64>,
    pub caption_token_acc: Option<f64>,
    pub map_avg: Option<f64>,
    pub hit_at_1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub samples: usize,
    pub kinds: Vec<KindReport>,
    /// Mean active experts per token and MoE block (0 without MoE blocks).
    pub mean_active_experts: f64,
}

pub const REPORT_CSV_HEADER: &str =
    "kind,count,r1_iou50,r1_iou70,mean_iou,dvc_f1,caption_token_acc,map_avg,hit_at_1";

impl EvalReport {
    pub fn kind(&self, kind: TaskKind) -> &KindReport {
        self.kinds.iter().find(|k| k.kind == kind).expect("every kind is reported")
    }

    /// Key-sorted JSON.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        serde_json::to_string_pretty(&value).expect("report serializes") + "\n"
    }

    /// One row per task kind; inapplicable metrics are empty cells.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for k in &self.kinds {
            let cells = [k.r1_iou50, k.r1_iou70, k.mean_iou, k.dvc_f1, k.caption_token_acc, k.map_avg, k.hit_at_1]
                .map(cell)
                .join(",");
            out.push_str(&format!("{},{},{}\n", k.kind, k.count, cells));
        }
        out
    }

    /// Human-readable table.
    pub fn summary(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:>8.4}")).unwrap_or_else(|| format!("{:>8}", "-"));
        let mut out = format!(
            "{:<4} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "kind", "n", "R@.5", "R@.7", "mIoU", "F1", "capacc", "mAP", "HIT@1"
        );
        for k in &self.kinds {
            out.push_str(&format!(
                "{:<4} {:>5} {} {} {} {} {} {} {}\n",
                k.kind.name(),
                k.count,
                cell(k.r1_iou50),
                cell(k.r1_iou70),
                cell(k.mean_iou),
                cell(k.dvc_f1),
                cell(k.caption_token_acc),
                cell(k.map_avg),
                cell(k.hit_at_1)
            ));
        }
        out.push_str(&format!("mean active experts per token: {:.4}\n", self.mean_active_experts));
        out
    }
}

#[derive(Debug, Clone)]
struct SampleScore {
    kind: TaskKind,
    seed: u64,
    index: usize,
    mr_iou: f64,
    f1: f64,
    ap: f64,
    hit: f64,
    caption: (usize, usize),
    active: (usize, usize),
}

fn score_sample(index: usize, sample: &SyntheticSample, pred: &EventSequence) -> Result<SampleScore> {
    let golds = &sample.gold;
    let mut s = SampleScore {
        kind: sample.kind,
        seed: sample.seed,
        index,
        mr_iou: 0.0,
        f1: 0.0,
        ap: 0.0,
        hit: 0.0,
        caption: caption_token_counts(pred, golds)?,
        active: (0, 0),
    };
    match sample.kind {
        TaskKind::Mr => {
            let gold = intervals(golds)
                .first()
                .copied()
                .ok_or_else(|| Error::contract("moment retrieval sample without a gold event"))?;
            let top = intervals(pred).first().copied();
            s.mr_iou = recall_at_iou(&[top], &[gold], 0.0)?.1;
        }
        TaskKind::Dvc => s.f1 = dvc_f1(pred, golds)?,
        TaskKind::Vhd => {
            let p = scored(pred);
            s.ap = highlight_map(&p, &intervals(golds), &MAP_THRESHOLDS)?;
            s.hit = hit_at_1(&p, &scored(golds))?;
        }
    }
    Ok(s)
}

fn aggregate(mut scores: Vec<SampleScore>) -> EvalReport {
    // canonical order makes the sums independent of dataset order
    scores.sort_by(|a, b| {
        a.kind
            .cmp(&b.kind)
            .then(a.seed.cmp(&b.seed))
            .then(a.index.cmp(&b.index))
    });
    let samples = scores.len();
    let (act, tok) = scores
        .iter()
        .fold((0usize, 0usize), |(a, t), s| (a + s.active.0, t + s.active.1));
    let kinds = TaskKind::ALL
        .iter()
        .map(|&kind| {
            let of: Vec<&SampleScore> = scores.iter().filter(|s| s.kind == kind).collect();
            let n = of.len();
            let mean = |f: &dyn Fn(&SampleScore) -> f64| {
                (n > 0).then(|| of.iter().map(|s| f(s)).sum::<f64>() / n as f64)
            };
            let (cc, ct) = of
                .iter()
                .fold((0usize, 0usize), |(c, t), s| (c + s.caption.0, t + s.caption.1));
            let applies = |k: TaskKind, v: Option<f64>| if kind == k { v } else { None };
            KindReport {
                kind,
                count: n,
                r1_iou50: applies(TaskKind::Mr, mean(&|s| (s.mr_iou >= 0.5) as u8 as f64)),
                r1_iou70: applies(TaskKind::Mr, mean(&|s| (s.mr_iou >= 0.7) as u8 as f64)),
                mean_iou: applies(TaskKind::Mr, mean(&|s| s.mr_iou)),
                dvc_f1: applies(TaskKind::Dvc, mean(&|s| s.f1)),
                caption_token_acc: (n > 0).then(|| if ct == 0 { 0.0 } else { cc as f64 / ct as f64 }),
                map_avg: applies(TaskKind::Vhd, mean(&|s| s.ap)),
                hit_at_1: applies(TaskKind::Vhd, mean(&|s| s.hit)),
            }
        })
        .collect();
    EvalReport {
        samples,
        kinds,
        mean_active_experts: if tok == 0 { 0.0 } else { act as f64 / tok as f64 },
    }
}

/// Scores fixed predictions (one per sample) without running a model.
pub fn evaluate_predictions(samples: &[SyntheticSample], preds: &[EventSequence]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation needs a nonempty dataset"));
    }
    if samples.len() != preds.len() {
        return Err(Error::contract(format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    let scores = samples
        .iter()
        .zip(preds)
        .enumerate()
        .map(|(i, (s, p))| score_sample(i, s, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(scores))
}

/// Worker count from `EXPERTFLOW_THREADS`, else the machine default.
pub fn eval_threads() -> usize {
    std::env::var("EXPERTFLOW_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Greedy generation for every sample, scored against gold. Activated
/// experts are counted on a teacher-forced pass over the gold sequence.
pub fn evaluate(model: &Model, samples: &[SyntheticSample], max_events: usize) -> Result<EvalReport> {
    Ok(evaluate_with_predictions(model, samples, max_events)?.1)
}

/// As [`evaluate`], also returning the predictions in dataset order.
pub fn evaluate_with_predictions(
    model: &Model,
    samples: &[SyntheticSample],
    max_events: usize,
) -> Result<(Vec<EventSequence>, EvalReport)> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation needs a nonempty dataset"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(eval_threads())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let run = |(i, s): (usize, &SyntheticSample)| -> Result<(EventSequence, SampleScore)> {
        let pred = model.generate(&s.frames, &s.frame_timestamps, &s.query, max_events)?;
        let mut score = score_sample(i, s, &pred)?;
        let stream = encode_events(&s.gold);
        let seq = SeqInput::teacher(&s.frames, &s.frame_timestamps, &s.query, &stream)?;
        score.active = model.routing_trace(&seq)?.activation_totals();
        Ok((pred, score))
    };
    let results: Vec<Result<(EventSequence, SampleScore)>> =
        pool.install(|| samples.par_iter().enumerate().map(run).collect());
    let (preds, scores): (Vec<_>, Vec<_>) = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    Ok((preds, aggregate(scores)))
}
