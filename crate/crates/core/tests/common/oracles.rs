//! Independent reference implementations used as test oracles.

use std::cmp::Ordering;

pub type Interval = (f64, f64);

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Top-k by full sort: (active ascending, renormalized weights).
pub fn topk(logits: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let p: Vec<f64> = e.iter().map(|v| v / z).collect();
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    let mut active = idx[..k].to_vec();
    active.sort();
    let mass: f64 = active.iter().map(|&i| p[i]).sum();
    let w = active.iter().map(|&i| p[i] / mass).collect();
    (active, w)
}

/// Dynamic gate evaluated directly from its defining inequality.
pub fn dynamic_active(s: &[f64], a: &[f64], g: &[f64], alpha: f64) -> Vec<usize> {
    (0..s.len())
        .filter(|&e| sigmoid((s[e] + alpha * a[e]) / (1.0 + alpha)) - sigmoid(g[e]) > 0.0)
        .collect()
}

/// IoU with the union taken as a hull for overlapping intervals.
pub fn iou(a: Interval, b: Interval) -> f64 {
    let overlap = a.1.min(b.1) - a.0.max(b.0);
    if overlap <= 0.0 {
        return 0.0;
    }
    overlap / (a.1.max(b.1) - a.0.min(b.0))
}

type Edge = (f64, usize, usize);

fn edge_better(x: &Edge, y: &Edge) -> Ordering {
    // higher IoU first, then lower prediction, then lower gold
    y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2))
}

fn matching_cmp(a: &[Edge], b: &[Edge]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match edge_better(x, y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    b.len().cmp(&a.len())
}

fn enumerate(
    i: usize,
    preds: &[Interval],
    golds: &[Interval],
    tau: f64,
    used: &mut Vec<bool>,
    cur: &mut Vec<Edge>,
    best: &mut Vec<Edge>,
) {
    if i == preds.len() {
        let mut sorted = cur.clone();
        sorted.sort_by(edge_better);
        if matching_cmp(&sorted, best) == Ordering::Less {
            *best = sorted;
        }
        return;
    }
    enumerate(i + 1, preds, golds, tau, used, cur, best);
    for j in 0..golds.len() {
        let v = iou(preds[i], golds[j]);
        if !used[j] && v >= tau {
            used[j] = true;
            cur.push((v, i, j));
            enumerate(i + 1, preds, golds, tau, used, cur, best);
            cur.pop();
            used[j] = false;
        }
    }
}

/// Enumerates every one-to-one matching over pairs with IoU ≥ `tau` and
/// returns the one that is lexicographically best in (IoU desc, pred,
/// gold) order, which is what descending-IoU greedy matching must produce.
pub fn best_matching(preds: &[Interval], golds: &[Interval], tau: f64) -> Vec<(usize, usize)> {
    let mut best = Vec::new();
    enumerate(0, preds, golds, tau, &mut vec![false; golds.len()], &mut Vec::new(), &mut best);
    let mut out: Vec<(usize, usize)> = best.iter().map(|e| (e.1, e.2)).collect();
    out.sort();
    out
}

pub fn dvc_f1(preds: &[Interval], golds: &[Interval]) -> f64 {
    let taus = [0.3, 0.5, 0.7, 0.9];
    let mut total = 0.0;
    for tau in taus {
        let f = if preds.is_empty() && golds.is_empty() {
            1.0
        } else {
            let m = best_matching(preds, golds, tau).len() as f64;
            let p = if preds.is_empty() { 0.0 } else { m / preds.len() as f64 };
            let r = if golds.is_empty() { 0.0 } else { m / golds.len() as f64 };
            if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            }
        };
        total += f;
    }
    total / taus.len() as f64
}

/// (interval, score) ranked by score desc, start asc, index asc via
/// selection sort.
pub fn rank(preds: &[(Interval, f64)]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..preds.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for c in 1..left.len() {
            let (a, b) = (preds[left[c]], preds[left[best]]);
            if a.1 > b.1 || (a.1 == b.1 && a.0 .0 < b.0 .0) {
                best = c;
            }
        }
        out.push(left.remove(best));
    }
    out
}

fn true_positives(ranked: &[(Interval, f64)], golds: &[Interval], tau: f64) -> usize {
    let mut free = vec![true; golds.len()];
    let mut tp = 0;
    for p in ranked {
        let mut pick: Option<usize> = None;
        for j in 0..golds.len() {
            if free[j] && iou(p.0, golds[j]) >= tau && pick.map_or(true, |b| iou(p.0, golds[j]) > iou(p.0, golds[b])) {
                pick = Some(j);
            }
        }
        if let Some(j) = pick {
            free[j] = false;
            tp += 1;
        }
    }
    tp
}

/// AP as the area under the precision/recall staircase, recomputing the
/// true positives of every ranked prefix from scratch.
pub fn average_precision(preds: &[(Interval, f64)], golds: &[Interval], tau: f64) -> f64 {
    if golds.is_empty() {
        return if preds.is_empty() { 1.0 } else { 0.0 };
    }
    let ranked: Vec<(Interval, f64)> = rank(preds).into_iter().map(|i| preds[i]).collect();
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for k in 1..=ranked.len() {
        let tp = true_positives(&ranked[..k], golds, tau) as f64;
        let recall = tp / golds.len() as f64;
        area += (recall - prev_recall) * (tp / k as f64);
        prev_recall = recall;
    }
    area
}

pub fn highlight_map(preds: &[(Interval, f64)], golds: &[Interval]) -> f64 {
    (average_precision(preds, golds, 0.5) + average_precision(preds, golds, 0.75)) / 2.0
}

pub fn hit_at_1(preds: &[(Interval, f64)], golds: &[(Interval, f64)]) -> f64 {
    let Some(&top) = rank(preds).first() else { return 0.0 };
    let max = golds.iter().map(|g| g.1).fold(f64::NEG_INFINITY, f64::max);
    let hit = golds.iter().any(|g| g.1 == max && iou(preds[top].0, g.0) >= 0.5);
    if hit {
        1.0
    } else {
        0.0
    }
}
