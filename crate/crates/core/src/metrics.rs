//! Graph evaluation: detection precision/recall, detection ratio, and
//! connectivity precision/recall.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{match_lanes, AssignmentError, MatchMap};
use crate::geometry::{BezierCurve, GeometryError, Polyline, DEFAULT_SPACING};
use crate::graph::{IncidenceMatrix, LaneGraph};

/// Default distance (meters) under which a sample counts as a true positive.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("spacing must be positive, got {0}")]
    BadSpacing(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("graphs have different degrees ({0} vs {1})")]
    DegreeMismatch(usize, usize),
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Counts and ratios for one precision/recall pair.
///
/// `precision = tp / (tp + fp)` and `recall = tp_recall / (tp_recall + fn)`.
/// For connectivity `tp_recall == tp`; for detection the recall side counts
/// ground-truth samples separately from estimated samples. A zero denominator
/// yields 1.0 with the matching `vacuous_*` flag set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tp_recall: u64,
    pub vacuous_precision: bool,
    pub vacuous_recall: bool,
}

impl PrecisionRecall {
    pub fn from_counts(tp: u64, fp: u64, tp_recall: u64, fn_: u64) -> Self {
        let (precision, vacuous_precision) = ratio(tp, tp + fp);
        let (recall, vacuous_recall) = ratio(tp_recall, tp_recall + fn_);
        Self {
            precision,
            recall,
            tp,
            fp,
            fn_,
            tp_recall,
            vacuous_precision,
            vacuous_recall,
        }
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (1.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub detection: PrecisionRecall,
    pub detection_ratio: f64,
    pub connectivity: PrecisionRecall,
    pub threshold: f64,
    pub spacing: f64,
}

impl MetricsReport {
    /// The five headline scalars: D-precision, D-recall, D-ratio, C-precision, C-recall.
    pub fn headline(&self) -> [f64; 5] {
        [
            self.detection.precision,
            self.detection.recall,
            self.detection_ratio,
            self.connectivity.precision,
            self.connectivity.recall,
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

fn check_params(threshold: f64, spacing: f64) -> Result<(), MetricsError> {
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(MetricsError::BadThreshold(threshold));
    }
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(MetricsError::BadSpacing(spacing));
    }
    Ok(())
}

fn within(samples: &Polyline, reference: &Polyline, threshold: f64) -> u64 {
    samples
        .points()
        .iter()
        .filter(|&&p| reference.distance_to_point(p) <= threshold)
        .count() as u64
}

/// Point-level detection precision/recall over matched curves resampled at `spacing`.
///
/// Estimated samples within `threshold` of their matched target polyline are
/// true positives; the rest, and all samples of unmatched estimates, are
/// false positives. Symmetrically for ground truth, with samples of
/// unmatched targets counted as false negatives.
pub fn detection_pr(
    est: &[BezierCurve],
    gt: &[BezierCurve],
    m: &MatchMap,
    threshold: f64,
    spacing: f64,
) -> Result<PrecisionRecall, MetricsError> {
    check_params(threshold, spacing)?;
    m.check_against(est.len(), gt.len())?;
    let est_samples = est
        .iter()
        .map(|c| c.sample(spacing))
        .collect::<Result<Vec<_>, _>>()?;
    let gt_samples = gt
        .iter()
        .map(|c| c.sample(spacing))
        .collect::<Result<Vec<_>, _>>()?;

    let (mut tp, mut fp) = (0, 0);
    for (i, samples) in est_samples.iter().enumerate() {
        let total = samples.len() as u64;
        let hit = m
            .get(i)
            .map_or(0, |g| within(samples, &gt_samples[g], threshold));
        tp += hit;
        fp += total - hit;
    }
    let mut inverse = vec![None; gt.len()];
    for (e, g) in m.pairs() {
        inverse[g] = Some(e);
    }
    let (mut tp_recall, mut fn_) = (0, 0);
    for (g, samples) in gt_samples.iter().enumerate() {
        let total = samples.len() as u64;
        let hit = inverse[g].map_or(0, |e| within(samples, &est_samples[e], threshold));
        tp_recall += hit;
        fn_ += total - hit;
    }
    Ok(PrecisionRecall::from_counts(tp, fp, tp_recall, fn_))
}

/// Fraction of targets matched by at least one estimate; 1.0 when there are none.
pub fn detection_ratio(m: &MatchMap, gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 1.0;
    }
    let matched: BTreeSet<usize> = m
        .pairs()
        .map(|(_, g)| g)
        .filter(|&g| g < gt_count)
        .collect();
    matched.len() as f64 / gt_count as f64
}

/// Edge-level precision/recall under an estimate-to-target correspondence.
///
/// `assignment[i]` is `M(i)`; it may be many-to-one. An estimated edge
/// `E[i][j]` is a true positive when both ends are matched and
/// `M(i) = M(j)` or `I[M(i)][M(j)] = 1`; otherwise it is a false positive.
/// A target edge `I[m][n]` is a false negative when no `i ∈ S(m)`, `j ∈ S(n)`
/// has `E[i][j] = 1`.
pub fn connectivity_pr(
    e_est: &IncidenceMatrix,
    i_gt: &IncidenceMatrix,
    assignment: &[Option<usize>],
) -> Result<PrecisionRecall, MetricsError> {
    if e_est.size() != assignment.len() {
        return Err(MetricsError::Dimension(format!(
            "estimated incidence is {0}x{0} but the assignment covers {1} estimates",
            e_est.size(),
            assignment.len()
        )));
    }
    if let Some(g) = assignment.iter().flatten().find(|&&g| g >= i_gt.size()) {
        return Err(MetricsError::Dimension(format!(
            "target {g} outside the {0}x{0} ground-truth incidence",
            i_gt.size()
        )));
    }
    let (mut tp, mut fp) = (0, 0);
    for (i, j) in e_est.ones() {
        match (assignment[i], assignment[j]) {
            (Some(mi), Some(mj)) if mi == mj || i_gt.get(mi, mj) => tp += 1,
            _ => fp += 1,
        }
    }
    let mut supporting = vec![Vec::new(); i_gt.size()];
    for (e, g) in assignment.iter().enumerate() {
        if let Some(g) = g {
            supporting[*g].push(e);
        }
    }
    let mut fn_ = 0;
    for (m, n) in i_gt.ones() {
        let found = supporting[m]
            .iter()
            .any(|&i| supporting[n].iter().any(|&j| e_est.get(i, j)));
        if !found {
            fn_ += 1;
        }
    }
    Ok(PrecisionRecall::from_counts(tp, fp, tp, fn_))
}

/// Matches lanes by L1 control distance, then computes all three metrics.
pub fn evaluate(
    est: &LaneGraph,
    gt: &LaneGraph,
    threshold: f64,
    spacing: f64,
) -> Result<MetricsReport, MetricsError> {
    check_params(threshold, spacing)?;
    if let (Some(a), Some(b)) = (est.degree(), gt.degree()) {
        if a != b {
            return Err(MetricsError::DegreeMismatch(a, b));
        }
    }
    let m = match_lanes(est.vertices(), gt.vertices())?;
    evaluate_with_matching(est, gt, &m, threshold, spacing)
}

/// Metrics under a caller-supplied matching.
pub fn evaluate_with_matching(
    est: &LaneGraph,
    gt: &LaneGraph,
    m: &MatchMap,
    threshold: f64,
    spacing: f64,
) -> Result<MetricsReport, MetricsError> {
    let detection = detection_pr(est.vertices(), gt.vertices(), m, threshold, spacing)?;
    let ratio = detection_ratio(m, gt.vertex_count());
    let connectivity = connectivity_pr(
        &est.incidence(),
        &gt.incidence(),
        &m.to_assignment(est.vertex_count()),
    )?;
    Ok(MetricsReport {
        detection,
        detection_ratio: ratio,
        connectivity,
        threshold,
        spacing,
    })
}

/// [`evaluate`] with the default threshold and spacing.
pub fn evaluate_default(est: &LaneGraph, gt: &LaneGraph) -> Result<MetricsReport, MetricsError> {
    evaluate(est, gt, DEFAULT_THRESHOLD, DEFAULT_SPACING)
}
