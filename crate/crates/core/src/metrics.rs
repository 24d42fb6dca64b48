//! Moment retrieval and highlight detection metrics.
//!
//! Spans are `(start, end)` pairs in any consistent unit; scored spans are
//! `(start, end, score)`.

use serde::{Deserialize, Serialize};

use crate::types::VERY_GOOD;

pub type Span = (f64, f64);
pub type ScoredSpan = (f64, f64, f64);

/// IoU thresholds `0.5, 0.55, .., 0.95`.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

/// Intersection over union of two intervals; 0 for disjoint or degenerate
/// unions.
pub fn iou_1d(a: Span, b: Span) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Indices of `scores` sorted by descending score, ties by ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// All-points interpolated average precision from a ranked list of hit
/// flags and the number of positives.
pub fn average_precision(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    for (k, hit) in hits.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / positives as f64);
    }
    // monotone precision envelope, then sum over recall steps
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

/// Fraction of samples whose highest-scored prediction reaches `threshold`
/// IoU with some ground-truth span. Samples without predictions count as
/// misses.
pub fn recall_at_1(predictions: &[Vec<ScoredSpan>], gts: &[Vec<Span>], threshold: f64) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(gts)
        .filter(|(preds, gt)| {
            let scores: Vec<f64> = preds.iter().map(|p| p.2).collect();
            ranking(&scores).first().is_some_and(|&top| {
                let p = preds[top];
                gt.iter().any(|g| iou_1d((p.0, p.1), *g) >= threshold)
            })
        })
        .count();
    hits as f64 / predictions.len() as f64
}

/// Hit flags for one sample at one threshold: predictions in score order,
/// each greedily matched to the highest-IoU unmatched ground truth.
pub fn match_detections(preds: &[ScoredSpan], gt: &[Span], threshold: f64) -> Vec<bool> {
    let scores: Vec<f64> = preds.iter().map(|p| p.2).collect();
    let mut used = vec![false; gt.len()];
    ranking(&scores)
        .into_iter()
        .map(|i| {
            let p = (preds[i].0, preds[i].1);
            let ious: Vec<f64> = gt.iter().map(|g| iou_1d(p, *g)).collect();
            let best = ranking(&ious)
                .into_iter()
                .find(|&j| !used[j] && ious[j] >= threshold);
            if let Some(j) = best {
                used[j] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// Per-threshold mAP averaged over samples.
pub fn map_moments(predictions: &[Vec<ScoredSpan>], gts: &[Vec<Span>], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| {
            if predictions.is_empty() {
                return 0.0;
            }
            let total: f64 = predictions
                .iter()
                .zip(gts)
                .map(|(p, g)| average_precision(&match_detections(p, g, t), g.len()))
                .sum();
            total / predictions.len() as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrResult {
    pub r1_at_0_5: f64,
    pub r1_at_0_7: f64,
    /// `(threshold, mAP)` pairs over the sweep.
    pub map_at: Vec<(f64, f64)>,
    pub map_avg: f64,
}

pub fn evaluate_moments(predictions: &[Vec<ScoredSpan>], gts: &[Vec<Span>]) -> MrResult {
    let thresholds = map_thresholds();
    let maps = map_moments(predictions, gts, &thresholds);
    let map_avg = maps.iter().sum::<f64>() / maps.len() as f64;
    MrResult {
        r1_at_0_5: recall_at_1(predictions, gts, 0.5),
        r1_at_0_7: recall_at_1(predictions, gts, 0.7),
        map_at: thresholds.into_iter().zip(maps).collect(),
        map_avg,
    }
}

/// Average precision of clips ranked by score against `label ≥ 4`, or
/// `None` when no clip qualifies.
pub fn highlight_ap(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let positives = labels.iter().filter(|l| **l >= VERY_GOOD).count();
    if positives == 0 {
        return None;
    }
    let hits: Vec<bool> = ranking(scores).into_iter().map(|i| labels[i] >= VERY_GOOD).collect();
    Some(average_precision(&hits, positives))
}

/// Mean highlight AP over samples that have at least one positive clip.
pub fn hd_map(scores: &[Vec<f64>], labels: &[Vec<f64>]) -> f64 {
    let aps: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter_map(|(s, l)| highlight_ap(s, l))
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Fraction of samples whose top-scored clip (lowest index on ties) is
/// labeled at least "very good".
pub fn hit_at_1(scores: &[Vec<f64>], labels: &[Vec<f64>]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| ranking(s).first().is_some_and(|&i| l[i] >= VERY_GOOD))
        .count();
    hits as f64 / scores.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HdResult {
    pub map: f64,
    pub hit_at_1: f64,
}

pub fn evaluate_highlights(scores: &[Vec<f64>], labels: &[Vec<f64>]) -> HdResult {
    HdResult {
        map: hd_map(scores, labels),
        hit_at_1: hit_at_1(scores, labels),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn iou_examples() {
        assert_eq!(iou_1d((0.2, 0.6), (0.2, 0.6)), 1.0);
        assert_eq!(iou_1d((0.0, 0.2), (0.5, 0.9)), 0.0);
        assert_abs_diff_eq!(iou_1d((0.2, 0.6), (0.4, 0.8)), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn recall_examples() {
        let gt = vec![vec![(0.0, 10.0)], vec![(0.0, 10.0)], vec![(0.0, 10.0)]];
        // IoUs 0.6, 0.4, 0.9
        let preds = vec![
            vec![(0.0, 6.0, 0.9), (50.0, 60.0, 0.1)],
            vec![(0.0, 4.0, 0.8)],
            vec![(1.0, 10.0, 0.7)],
        ];
        assert_abs_diff_eq!(recall_at_1(&preds, &gt, 0.5), 2.0 / 3.0, epsilon = 1e-12);
        let exact: Vec<Vec<ScoredSpan>> = gt.iter().map(|g| vec![(g[0].0, g[0].1, 1.0)]).collect();
        assert_eq!(recall_at_1(&exact, &gt, 0.7), 1.0);
        let disjoint = vec![vec![(20.0, 30.0, 1.0)]; 3];
        assert_eq!(recall_at_1(&disjoint, &gt, 0.5), 0.0);
    }

    #[test]
    fn map_perfect_and_empty() {
        let gt = vec![vec![(0.0, 2.0), (5.0, 8.0)]];
        let perfect = vec![vec![(0.0, 2.0, 0.9), (5.0, 8.0, 0.8)]];
        assert!(map_moments(&perfect, &gt, &map_thresholds()).iter().all(|v| *v == 1.0));
        let miss = vec![vec![(20.0, 30.0, 0.9)]];
        assert!(map_moments(&miss, &gt, &map_thresholds()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn map_single_gt_is_reciprocal_rank() {
        let gt = vec![vec![(0.0, 1.0)]];
        let preds = vec![vec![(3.0, 4.0, 0.9), (5.0, 6.0, 0.8), (0.0, 1.0, 0.7)]];
        assert_abs_diff_eq!(map_moments(&preds, &gt, &[0.5])[0], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn hd_examples() {
        assert_eq!(highlight_ap(&[0.1, 0.2, 0.3], &[0.0, 2.0, 4.0]), Some(1.0));
        assert_eq!(highlight_ap(&[0.1, 0.2], &[1.0, 3.0]), None);
        let scores = vec![vec![0.1, 0.2], vec![0.3, 0.1]];
        let labels = vec![vec![0.0, 4.0], vec![0.0, 0.0]];
        assert_eq!(hd_map(&scores, &labels), 1.0);
    }

    #[test]
    fn hit_examples() {
        assert_eq!(hit_at_1(&[vec![0.9, 0.1]], &[vec![4.0, 0.0]]), 1.0);
        assert_eq!(hit_at_1(&[vec![0.9, 0.1]], &[vec![3.0, 4.0]]), 0.0);
        let s = vec![vec![1.0, 0.0]; 5];
        let l = vec![
            vec![4.0, 0.0],
            vec![4.5, 0.0],
            vec![2.0, 4.0],
            vec![4.0, 4.0],
            vec![0.0, 4.0],
        ];
        assert_abs_diff_eq!(hit_at_1(&s, &l), 0.6, epsilon = 1e-12);
        // ties go to the lowest index
        assert_eq!(hit_at_1(&[vec![0.5, 0.5]], &[vec![4.0, 0.0]]), 1.0);
    }

    /// AP from first principles: rebuild the matching on every score prefix
    /// and take, at each recall increase, the best precision at that recall
    /// or beyond.
    fn brute_force_ap(preds: &[ScoredSpan], gt: &[Span], thr: f64) -> f64 {
        let mut sorted: Vec<ScoredSpan> = preds.to_vec();
        let scores: Vec<f64> = preds.iter().map(|p| p.2).collect();
        let order = ranking(&scores);
        sorted = order.iter().map(|&i| sorted[i]).collect();
        let n = sorted.len();
        let mut pr = Vec::new();
        for k in 1..=n {
            let prefix = &sorted[..k];
            let mut used = vec![false; gt.len()];
            let mut tp = 0;
            for p in prefix {
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in gt.iter().enumerate() {
                    let iou = iou_1d((p.0, p.1), *g);
                    if !used[j] && iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                        best = Some((j, iou));
                    }
                }
                if let Some((j, _)) = best {
                    used[j] = true;
                    tp += 1;
                }
            }
            pr.push((tp as f64 / k as f64, tp as f64 / gt.len() as f64));
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for k in 0..n {
            let r = pr[k].1;
            if r > prev {
                let p = pr[k..].iter().map(|x| x.0).fold(0.0, f64::max);
                ap += (r - prev) * p;
                prev = r;
            }
        }
        ap
    }

    fn brute_force_hit(scores: &[f64], labels: &[f64]) -> bool {
        let mut best = 0;
        for i in 1..scores.len() {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        labels[best] >= 4.0
    }

    fn span() -> impl Strategy<Value = Span> {
        (0u32..20, 1u32..8).prop_map(|(s, w)| (f64::from(s), f64::from(s + w)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn map_matches_brute_force(
            gt in prop::collection::vec(span(), 1..4),
            preds in prop::collection::vec((span(), 0u32..5), 1..7),
            ti in 0usize..10,
        ) {
            let thr = map_thresholds()[ti];
            let preds: Vec<ScoredSpan> = preds.iter().map(|(s, sc)| (s.0, s.1, f64::from(*sc))).collect();
            let fast = average_precision(&match_detections(&preds, &gt, thr), gt.len());
            prop_assert!((fast - brute_force_ap(&preds, &gt, thr)).abs() < 1e-12);
        }

        #[test]
        fn highlight_ap_matches_brute_force(
            items in prop::collection::vec((0u32..6, 0u32..5), 6),
        ) {
            let scores: Vec<f64> = items.iter().map(|i| f64::from(i.0)).collect();
            let labels: Vec<f64> = items.iter().map(|i| f64::from(i.1)).collect();
            // ranked clips are detections, positives are the ground truth
            let preds: Vec<ScoredSpan> = scores.iter().enumerate().map(|(i, s)| (i as f64, i as f64 + 1.0, *s)).collect();
            let gt: Vec<Span> = labels.iter().enumerate().filter(|(_, l)| **l >= 4.0).map(|(i, _)| (i as f64, i as f64 + 1.0)).collect();
            match highlight_ap(&scores, &labels) {
                None => prop_assert!(gt.is_empty()),
                Some(ap) => prop_assert!((ap - brute_force_ap(&preds, &gt, 0.99)).abs() < 1e-12),
            }
        }

        #[test]
        fn recall_and_hit_match_brute_force(
            samples in prop::collection::vec((prop::collection::vec((span(), 0u32..50), 1..5), span()), 1..6),
            clips in prop::collection::vec(prop::collection::vec((0u32..100, 0u32..5), 1..6), 1..6),
        ) {
            let preds: Vec<Vec<ScoredSpan>> = samples.iter().map(|(p, _)| p.iter().map(|(s, sc)| (s.0, s.1, f64::from(*sc) + 0.001 * s.0)).collect()).collect();
            let gts: Vec<Vec<Span>> = samples.iter().map(|(_, g)| vec![*g]).collect();
            let mut hits = 0;
            for (p, g) in preds.iter().zip(&gts) {
                let mut top = 0;
                for i in 1..p.len() {
                    if p[i].2 > p[top].2 { top = i; }
                }
                if iou_1d((p[top].0, p[top].1), g[0]) >= 0.5 { hits += 1; }
            }
            prop_assert!((recall_at_1(&preds, &gts, 0.5) - hits as f64 / preds.len() as f64).abs() < 1e-12);

            let scores: Vec<Vec<f64>> = clips.iter().map(|c| c.iter().map(|x| f64::from(x.0)).collect()).collect();
            let labels: Vec<Vec<f64>> = clips.iter().map(|c| c.iter().map(|x| f64::from(x.1)).collect()).collect();
            let brute = scores.iter().zip(&labels).filter(|(s, l)| brute_force_hit(s, l)).count();
            prop_assert!((hit_at_1(&scores, &labels) - brute as f64 / scores.len() as f64).abs() < 1e-12);
        }

        #[test]
        fn metrics_invariant_to_monotone_rescoring(
            gt in prop::collection::vec(span(), 1..3),
            preds in prop::collection::vec((span(), 0u32..9), 1..6),
        ) {
            let a: Vec<ScoredSpan> = preds.iter().map(|(s, sc)| (s.0, s.1, f64::from(*sc))).collect();
            let b: Vec<ScoredSpan> = a.iter().map(|p| (p.0, p.1, (p.2 * 0.3).exp() - 7.0)).collect();
            let ra = evaluate_moments(std::slice::from_ref(&a), std::slice::from_ref(&gt));
            let rb = evaluate_moments(&[b], std::slice::from_ref(&gt));
            prop_assert_eq!(ra, rb);
            let s: Vec<f64> = a.iter().map(|p| p.2).collect();
            let l: Vec<f64> = a.iter().map(|p| if p.0 < 8.0 { 4.0 } else { 1.0 }).collect();
            let s2: Vec<f64> = s.iter().map(|v| v * 3.0 + 1.0).collect();
            prop_assert_eq!(evaluate_highlights(&[s], std::slice::from_ref(&l)), evaluate_highlights(&[s2], &[l]));
        }
    }
}
