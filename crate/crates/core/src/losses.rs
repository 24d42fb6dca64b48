//! Training objectives: clip- and frame-level alignment, highlight margin
//! and rank losses, and the set-prediction moment loss.
//!
//! Loss functions build nodes on a [`Graph`] so they can be differentiated;
//! scalar helpers such as [`giou_1d`] work on plain values.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::matching::MatchResult;
use crate::types::Moment;

/// Loss coefficients, margin and temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub iou: f64,
    pub cls: f64,
    pub clip: f64,
    pub frame: f64,
    pub margin: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 10.0,
            iou: 1.0,
            cls: 4.0,
            clip: 1.0,
            frame: 1.0,
            margin: 0.2,
            tau: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.iou, self.cls, self.clip, self.frame, self.margin];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config("loss.tau must be positive".into()));
        }
        Ok(())
    }
}

/// Generalized IoU of two moments on their unclamped spans.
///
/// A zero-width union only happens for two identical points, which score 1.
pub fn giou_1d(a: &Moment, b: &Moment) -> f64 {
    let (s1, e1) = a.raw_span();
    let (s2, e2) = b.raw_span();
    let inter = (e1.min(e2) - s1.max(s2)).max(0.0);
    let union = (e1 - s1) + (e2 - s2) - inter;
    let hull = e1.max(e2) - s1.min(s2);
    if hull <= 0.0 {
        return if (s1, e1) == (s2, e2) { 1.0 } else { 0.0 };
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (hull - union) / hull
}

/// `λ_L1·(|Δc| + |Δw|) + λ_iou·(1 − gIoU)`.
pub fn span_loss(m: &Moment, pred: &Moment, w: &LossWeights) -> f64 {
    let l1 = (m.center - pred.center).abs() + (m.width - pred.width).abs();
    w.l1 * l1 + w.iou * (1.0 - giou_1d(m, pred))
}

/// Differentiable span loss between a fixed target and a `1 × 2`
/// (center, width) prediction row.
pub fn span_loss_graph(g: &Graph, target: &Moment, pred: Var, w: &LossWeights) -> Var {
    let c = g.entry(pred, 0, 0);
    let wd = g.entry(pred, 0, 1);
    let l1 = g.add(
        g.abs(g.offset(c, -target.center)),
        g.abs(g.offset(wd, -target.width)),
    );
    let half = g.scale(wd, 0.5);
    let start = g.sub(c, half);
    let end = g.add(c, half);
    let (ts, te) = target.raw_span();
    let t_start = g.scalar_constant(ts);
    let t_end = g.scalar_constant(te);
    let inter = g.relu(g.sub(g.minimum(end, t_end), g.maximum(start, t_start)));
    let union = g.sub(g.offset(wd, target.width), inter);
    let hull = g.sub(g.maximum(end, t_end), g.minimum(start, t_start));
    let iou = g.div(inter, union);
    let giou = g.sub(iou, g.div(g.sub(hull, union), hull));
    let iou_term = g.offset(g.neg(giou), 1.0);
    g.add(g.scale(l1, w.l1), g.scale(iou_term, w.iou))
}

/// Symmetric InfoNCE over two `B × B` similarity tables: `row_sim[i][j]`
/// is normalized over `j` with target `j = i`, `col_sim[i][j]` over `i`
/// with target `i = j`. Each direction is averaged over `B`.
pub fn clip_consistency_from_similarities(g: &Graph, row_sim: Var, col_sim: Var) -> Result<Var> {
    let (b, b2) = g.shape(row_sim);
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    if b != b2 || g.shape(col_sim) != (b, b) {
        return Err(Error::Shape("similarity tables must be square and equal".into()));
    }
    let eye = g.constant(Array2::eye(b));
    let rows = g.sum(g.mul(g.log_softmax(row_sim), eye));
    let cols = g.sum(g.mul(g.log_softmax(g.transpose(col_sim)), eye));
    Ok(g.scale(g.add(rows, cols), -1.0 / b as f64))
}

/// Clip-level consistency between each sample's anchor `t_a^i` and the
/// enriched anchors `t̂_a^{ij}` obtained by letting anchor `i` attend over
/// video `j`.
pub fn clip_consistency_loss(g: &Graph, anchors: &[Var], table: &[Vec<Var>]) -> Result<Var> {
    let b = anchors.len();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    if table.len() != b || table.iter().any(|r| r.len() != b) {
        return Err(Error::Shape(format!("cross table must be {b} × {b}")));
    }
    let mut row_rows = Vec::with_capacity(b);
    let mut col_rows = Vec::with_capacity(b);
    for i in 0..b {
        let a: Vec<Var> = (0..b).map(|j| g.matmul_t(table[i][j], anchors[i])).collect();
        let c: Vec<Var> = (0..b).map(|j| g.matmul_t(table[i][j], anchors[j])).collect();
        row_rows.push(g.concat_cols(&a));
        col_rows.push(g.concat_cols(&c));
    }
    clip_consistency_from_similarities(g, g.concat_rows(&row_rows), g.concat_rows(&col_rows))
}

/// Mean binary cross-entropy between `σ(v̂_i · t_a)` and the clip
/// relevance indicators over valid clips.
pub fn frame_relevance_loss(g: &Graph, video: Var, anchor: Var, labels: &[u8], mask: &[bool]) -> Result<Var> {
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(Error::AllMasked("video"));
    }
    if labels.len() != mask.len() || g.shape(video).0 != mask.len() {
        return Err(Error::Shape("relevance labels do not cover the clips".into()));
    }
    let logits = g.matmul_t(video, anchor);
    bce_with_logits(g, logits, labels, mask)
}

/// Masked mean of `softplus(z) − c·z` over an `n × 1` logit column.
pub fn bce_with_logits(g: &Graph, logits: Var, labels: &[u8], mask: &[bool]) -> Result<Var> {
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(Error::AllMasked("video"));
    }
    let len = mask.len();
    let target = Array2::from_shape_fn((len, 1), |(i, _)| f64::from(labels[i].min(1)));
    let weight = Array2::from_shape_fn((len, 1), |(i, _)| if mask[i] { 1.0 / n as f64 } else { 0.0 });
    // softplus(z) = max(z, 0) + ln(1 + e^{-|z|})
    let softplus = g.add(g.relu(logits), g.ln(g.offset(g.exp(g.neg(g.abs(logits))), 1.0)));
    let per_clip = g.sub(softplus, g.mul(logits, g.constant(target)));
    Ok(g.sum(g.mul(per_clip, g.constant(weight))))
}

/// Clip roles for the margin loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MarginPick {
    pub high: usize,
    pub low: usize,
    pub inside: usize,
    pub outside: Option<usize>,
}

/// Highest- and lowest-scored in-moment clips, plus one uniformly sampled
/// in-moment and one out-of-moment valid clip. `None` without in-moment
/// clips.
pub fn pick_margin_clips(scores: &[f64], inside: &[bool], mask: &[bool], rng: &mut impl Rng) -> Option<MarginPick> {
    let ins: Vec<usize> = (0..scores.len()).filter(|&i| mask[i] && inside[i]).collect();
    let outs: Vec<usize> = (0..scores.len()).filter(|&i| mask[i] && !inside[i]).collect();
    if ins.is_empty() {
        return None;
    }
    let high = *ins
        .iter()
        .max_by(|&&a, &&b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
        .unwrap();
    let low = *ins
        .iter()
        .min_by(|&&a, &&b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)))
        .unwrap();
    let inside = ins[rng.gen_range(0..ins.len())];
    let outside = (!outs.is_empty()).then(|| outs[rng.gen_range(0..outs.len())]);
    Some(MarginPick {
        high,
        low,
        inside,
        outside,
    })
}

/// `max(0, Δ + S_low − S_high) + max(0, Δ + S_out − S_in)` for an `L × 1`
/// score column; the second term is dropped without an outside clip.
pub fn margin_terms(g: &Graph, scores: Var, pick: MarginPick, delta: f64) -> Var {
    let s = |i| g.entry(scores, i, 0);
    let first = g.relu(g.offset(g.sub(s(pick.low), s(pick.high)), delta));
    match pick.outside {
        Some(out) => g.add(first, g.relu(g.offset(g.sub(s(out), s(pick.inside)), delta))),
        None => first,
    }
}

/// Margin loss with freshly sampled clips; zero when no clip lies inside a
/// ground-truth moment.
pub fn margin_loss(g: &Graph, scores: Var, inside: &[bool], mask: &[bool], delta: f64, rng: &mut impl Rng) -> Var {
    let values: Vec<f64> = g.value(scores).iter().copied().collect();
    match pick_margin_clips(&values, inside, mask, rng) {
        Some(pick) => margin_terms(g, scores, pick, delta),
        None => g.scalar_constant(0.0),
    }
}

/// Positive sets of the rank groups: for every occupied label value `ℓ`,
/// clips with label `≥ ℓ`. Groups with no negatives are dropped since they
/// contribute exactly zero.
pub fn rank_groups(labels: &[f64], mask: &[bool]) -> Vec<Vec<bool>> {
    let mut levels: Vec<f64> = labels
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(l, _)| *l)
        .collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    levels
        .into_iter()
        .rev()
        .map(|lvl| labels.iter().zip(mask).map(|(l, m)| *m && *l >= lvl).collect::<Vec<bool>>())
        .filter(|pos| pos.iter().zip(mask).any(|(p, m)| *m && !*p))
        .filter(|pos| pos.iter().any(|p| *p))
        .collect()
}

/// `−Σ_r log(Σ_pos e^{S/τ} / Σ_valid e^{S/τ})` over the given groups.
pub fn rank_contrastive_loss(g: &Graph, scores: Var, groups: &[Vec<bool>], mask: &[bool], tau: f64) -> Var {
    if groups.is_empty() {
        return g.scalar_constant(0.0);
    }
    let row = g.scale(g.transpose(scores), 1.0 / tau);
    let probs = g.masked_softmax(row, mask);
    let len = mask.len();
    let indicator = Array2::from_shape_fn((len, groups.len()), |(i, r)| f64::from(u8::from(groups[r][i] && mask[i])));
    let mass = g.matmul(probs, g.constant(indicator));
    g.neg(g.sum(g.ln(mass)))
}

/// `Σ_q −λ_cls·log p̂_q(c_q) + Σ_matched span loss`, where `c_q` is
/// foreground for matched queries and background otherwise.
///
/// `spans` is `M × 2` (center, width); `class_log_probs` is `M × 2` with
/// foreground in column 0.
pub fn moment_retrieval_loss(
    g: &Graph,
    gt: &[Moment],
    spans: Var,
    class_log_probs: Var,
    matching: &MatchResult,
    w: &LossWeights,
) -> Var {
    let m = g.shape(spans).0;
    let matched = matching.inverse(m);
    let onehot = Array2::from_shape_fn((m, 2), |(q, c)| {
        let fg = matched[q].is_some();
        f64::from(u8::from((c == 0) == fg))
    });
    let cls = g.scale(g.sum(g.mul(class_log_probs, g.constant(onehot))), -w.cls);
    let mut total = cls;
    for (i, &q) in matching.assignment.iter().enumerate() {
        let row = g.slice_rows(spans, q, 1);
        total = g.add(total, span_loss_graph(g, &gt[i], row, w));
    }
    total
}

/// Individual loss terms of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<T> {
    pub margin: T,
    pub rank: T,
    pub mr: T,
    pub clip: T,
    pub frame: T,
}

impl LossTerms<f64> {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.margin + self.rank + self.mr + w.clip * self.clip + w.frame * self.frame
    }
}

/// `L_margin + L_rank + L_mr + λ_clip·L_clip + λ_frame·L_frame`.
pub fn total_loss(g: &Graph, terms: &LossTerms<Var>, w: &LossWeights) -> Var {
    let hd = g.add(terms.margin, terms.rank);
    let base = g.add(hd, terms.mr);
    let aux = g.add(g.scale(terms.clip, w.clip), g.scale(terms.frame, w.frame));
    g.add(base, aux)
}
