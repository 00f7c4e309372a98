//! Bipartite matching between ground-truth hands and model queries, and the
//! set loss computed under a matching.
//!
//! Matching cost uses the class probability (`-p̂`), the loss uses
//! cross-entropy (`-log p̂`). Unmatched queries are supervised toward the
//! no-hand class with a reduced weight.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::HandSide;
use crate::model::{DetectionSet, DetectionVars, QueryPrediction, JOINT_OUTPUTS, NO_HAND_CLASS, NUM_CLASSES};
use crate::nn::graph::Graph;
use crate::nn::{softmax, NnError, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchingError {
    #[error("cost matrix has {rows} rows but only {cols} columns")]
    ShapeError { rows: usize, cols: usize },
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("inconsistent assignment: {0}")]
    InconsistentAssignment(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Row-major costs, one row per ground-truth hand, one column per query.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Scalar> CostMatrix<T> {
    pub fn new(rows: usize, cols: usize, values: Vec<T>) -> Result<Self, MatchingError> {
        if rows > cols {
            return Err(MatchingError::ShapeError { rows, cols });
        }
        if values.len() != rows * cols {
            return Err(MatchingError::InconsistentAssignment(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MatchingError::NonFinite { row: i / cols, col: i % cols });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, MatchingError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MatchingError::InconsistentAssignment("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.values[r * self.cols + c]
    }

    /// Sum of the entries at `cols[r]` for each row `r`, accumulated in row order.
    pub fn cost_of(&self, cols: &[usize]) -> T {
        cols.iter().enumerate().map(|(r, &c)| self.get(r, c)).fold(T::zero(), |a, b| a + b)
    }
}

/// Injective row-to-column map.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment<T> {
    /// `(row, col)` pairs sorted by row; every row appears once.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: T,
}

impl<T: Scalar> Assignment<T> {
    pub fn col_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }
}

/// Shortest-augmenting-path Hungarian algorithm over `rows <= cols`.
/// Returns the column of each row.
fn solve<T: Scalar>(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> T) -> Vec<usize> {
    let (n, m) = (rows, cols);
    if n == 0 {
        return Vec::new();
    }
    let inf = T::infinity();
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=m {
        if p[j] > 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Minimum-cost injective assignment of every row to a distinct column.
///
/// Among optimal assignments the lexicographically smallest column sequence
/// is returned: rows are fixed in order to the smallest column that still
/// admits an optimal completion.
pub fn hungarian<T: Scalar>(costs: &CostMatrix<T>) -> Result<Assignment<T>, MatchingError> {
    let (n, m) = (costs.rows, costs.cols);
    if n > m {
        return Err(MatchingError::ShapeError { rows: n, cols: m });
    }
    let optimal = solve(n, m, |r, c| costs.get(r, c));
    let best = costs.cost_of(&optimal);
    let max_abs = costs.values.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    let tol = T::epsilon() * T::of(64.0 * (n + 1) as f64) * (T::one() + max_abs * T::of(n as f64));

    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    let mut used = vec![false; m];
    let mut fixed = T::zero();
    for r in 0..n {
        let free: Vec<usize> = (0..m).filter(|&c| !used[c]).collect();
        let mut pick = None;
        for &c in &free {
            let rest_cols: Vec<usize> = free.iter().copied().filter(|&x| x != c).collect();
            let rest_rows = n - r - 1;
            let rest = if rest_rows == 0 {
                T::zero()
            } else {
                let sub = solve(rest_rows, rest_cols.len(), |i, j| costs.get(r + 1 + i, rest_cols[j]));
                sub.iter().enumerate().fold(T::zero(), |a, (i, &j)| a + costs.get(r + 1 + i, rest_cols[j]))
            };
            if fixed + costs.get(r, c) + rest <= best + tol {
                pick = Some(c);
                break;
            }
        }
        // The solver's own column always qualifies, so this fallback is never hit
        // unless rounding disagrees with the tolerance.
        let c = pick.unwrap_or(optimal[r]);
        used[c] = true;
        fixed += costs.get(r, c);
        chosen.push(c);
    }
    Ok(Assignment {
        total_cost: costs.cost_of(&chosen),
        pairs: chosen.into_iter().enumerate().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// λ_cls
    pub cls: f64,
    /// λ_L1
    pub l1: f64,
    /// Cross-entropy weight of queries matched to no hand.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, l1: 5.0, no_object: 0.1 }
    }
}

/// A ground-truth hand in the model's normalized target space.
#[derive(Debug, Clone, PartialEq)]
pub struct GtHand<T> {
    pub side: HandSide,
    pub joints_norm: Vec<T>,
}

fn mean_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> T {
    let s: T = a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum();
    s / T::of(JOINT_OUTPUTS as f64)
}

/// `λ_cls · (−p̂(side)) + λ_L1 · mean |ĵ − j|` over the 63 normalized values.
pub fn match_cost<T: Scalar>(gt_side: HandSide, gt_joints_norm: &[T], pred: &QueryPrediction<T>, weights: &LossWeights) -> T {
    let p = pred.class_probs()[gt_side.class_index()];
    T::of(weights.cls) * (-p) + T::of(weights.l1) * mean_abs_diff(pred.joints_norm(), gt_joints_norm)
}

pub fn cost_matrix<T: Scalar>(det: &DetectionSet<T>, gts: &[GtHand<T>], weights: &LossWeights) -> Result<CostMatrix<T>, MatchingError> {
    let values = gts
        .iter()
        .flat_map(|gt| det.queries.iter().map(move |q| match_cost(gt.side, &gt.joints_norm, q, weights)))
        .collect();
    CostMatrix::new(gts.len(), det.len(), values)
}

pub fn match_hands<T: Scalar>(det: &DetectionSet<T>, gts: &[GtHand<T>], weights: &LossWeights) -> Result<Assignment<T>, MatchingError> {
    hungarian(&cost_matrix(det, gts, weights)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub cls_loss: T,
    pub l1_loss: T,
    pub total: T,
    pub weights: LossWeights,
}

/// Per query: classification target and cross-entropy weight. Also returns
/// the matched `(gt, query)` pairs.
#[allow(clippy::type_complexity)]
fn targets<T: Scalar>(
    n_queries: usize,
    gts: &[GtHand<T>],
    assignment: &Assignment<T>,
    weights: &LossWeights,
) -> Result<(Vec<(usize, T)>, Vec<(usize, usize)>), MatchingError> {
    let bad = |m: String| Err(MatchingError::InconsistentAssignment(m));
    if assignment.pairs.len() != gts.len() {
        return bad(format!("{} pairs for {} ground-truth hands", assignment.pairs.len(), gts.len()));
    }
    let mut per_query = vec![(NO_HAND_CLASS, T::of(weights.no_object)); n_queries];
    let mut seen_rows = vec![false; gts.len()];
    let mut seen_cols = vec![false; n_queries];
    for &(r, c) in &assignment.pairs {
        if r >= gts.len() || c >= n_queries {
            return bad(format!("pair ({r}, {c}) out of range"));
        }
        if std::mem::replace(&mut seen_rows[r], true) || std::mem::replace(&mut seen_cols[c], true) {
            return bad(format!("pair ({r}, {c}) is not injective"));
        }
        if gts[r].joints_norm.len() != JOINT_OUTPUTS {
            return bad(format!("ground truth {r} has {} joint values", gts[r].joints_norm.len()));
        }
        per_query[c] = (gts[r].side.class_index(), T::one());
    }
    Ok((per_query, assignment.pairs.clone()))
}

/// Cross-entropy over all queries (mean, no-hand terms down-weighted) plus
/// mean L1 over matched queries.
pub fn set_loss<T: Scalar>(
    preds: &DetectionSet<T>,
    gts: &[GtHand<T>],
    assignment: &Assignment<T>,
    weights: &LossWeights,
) -> Result<LossBreakdown<T>, MatchingError> {
    let (per_query, pairs) = targets(preds.len(), gts, assignment, weights)?;
    let mut cls = T::zero();
    for (q, &(target, w)) in preds.queries.iter().zip(&per_query) {
        let p = softmax(q.class_logits());
        cls += w * -p[target].ln();
    }
    let cls_loss = cls / T::of(preds.len() as f64);
    let l1_loss = if pairs.is_empty() {
        T::zero()
    } else {
        let s: T = pairs
            .iter()
            .map(|&(r, c)| mean_abs_diff(preds.queries[c].joints_norm(), &gts[r].joints_norm))
            .sum();
        s / T::of(pairs.len() as f64)
    };
    Ok(LossBreakdown {
        cls_loss,
        l1_loss,
        total: T::of(weights.cls) * cls_loss + T::of(weights.l1) * l1_loss,
        weights: *weights,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub l1: Var,
}

/// [`set_loss`] recorded on a graph, differentiable in the head outputs.
pub fn set_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    det: DetectionVars,
    gts: &[GtHand<T>],
    assignment: &Assignment<T>,
    weights: &LossWeights,
) -> Result<LossVars, MatchingError> {
    let (n_queries, _) = g.shape(det.logits);
    let (per_query, pairs) = targets(n_queries, gts, assignment, weights)?;

    let logp = g.log_softmax_rows(det.logits);
    let nq = T::of(n_queries as f64);
    let mut pick = Tensor::zeros(n_queries, NUM_CLASSES);
    for (q, &(target, w)) in per_query.iter().enumerate() {
        pick.set(q, target, -w / nq);
    }
    let picked = g.mul_const(logp, pick)?;
    let cls = g.sum(picked);

    let mut target = Tensor::zeros(n_queries, JOINT_OUTPUTS);
    let mut mask = Tensor::zeros(n_queries, JOINT_OUTPUTS);
    let denom = T::of((JOINT_OUTPUTS * pairs.len().max(1)) as f64);
    for &(r, c) in &pairs {
        target.row_mut(c).copy_from_slice(&gts[r].joints_norm);
        for m in mask.row_mut(c) {
            *m = T::one() / denom;
        }
    }
    let target = g.input(target);
    let diff = g.sub(det.joints, target)?;
    let abs = g.abs(diff);
    let masked = g.mul_const(abs, mask)?;
    let l1 = g.sum(masked);

    let a = g.scale(cls, T::of(weights.cls));
    let b = g.scale(l1, T::of(weights.l1));
    let total = g.add(a, b)?;
    Ok(LossVars { total, cls, l1 })
}
