//! Minimum-cost bipartite assignment between ground-truth moments and
//! predicted moment queries.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{giou_1d, LossWeights};
use crate::types::{Moment, MomentPredictionSet};

/// `assignment[i]` is the prediction matched to ground-truth moment `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub assignment: Vec<usize>,
}

impl MatchResult {
    /// Ground-truth index matched to each prediction, if any.
    pub fn inverse(&self, predictions: usize) -> Vec<Option<usize>> {
        let mut inv = vec![None; predictions];
        for (gt, &p) in self.assignment.iter().enumerate() {
            inv[p] = Some(gt);
        }
        inv
    }
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows ≤ cols`), via shortest augmenting paths with potentials.
pub fn hungarian(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let (n, m) = cost.dim();
    if n > m {
        return Err(Error::TooManyMoments { gt: n, queries: m });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Shape("matching cost has non-finite entries".into()));
    }
    // 1-based potentials; column 0 is a virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// `C[i, q] = −λ_cls·p_fg(q) + λ_L1·‖m_i − m̂_q‖₁ + λ_iou·(1 − gIoU(m_i, m̂_q))`.
pub fn matching_cost(gt: &[Moment], preds: &MomentPredictionSet, w: &LossWeights) -> Array2<f64> {
    Array2::from_shape_fn((gt.len(), preds.len()), |(i, q)| {
        let (m, p) = (&gt[i], &preds.spans[q]);
        let l1 = (m.center - p.center).abs() + (m.width - p.width).abs();
        -w.cls * preds.fg_prob[q] + w.l1 * l1 + w.iou * (1.0 - giou_1d(m, p))
    })
}

pub fn hungarian_match(gt: &[Moment], preds: &MomentPredictionSet, w: &LossWeights) -> Result<MatchResult> {
    if gt.len() > preds.len() {
        return Err(Error::TooManyMoments {
            gt: gt.len(),
            queries: preds.len(),
        });
    }
    Ok(MatchResult {
        assignment: hungarian(&matching_cost(gt, preds, w))?,
    })
}
