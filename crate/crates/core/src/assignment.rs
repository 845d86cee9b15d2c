//! Optimal assignment between estimated and ground-truth lanes, and the
//! detection matching loss `L = L_CE + λ L_1`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::geometry::{BezierCurve, GeometryError};

/// Default weight of the L1 term in the matching loss.
pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignmentError {
    #[error("cost matrix rows have unequal lengths")]
    Ragged,
    #[error("cost ({row}, {col}) = {value} is not a finite nonnegative number")]
    BadCost { row: usize, col: usize, value: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("match {est} -> {gt} out of range ({est_len} estimates, {gt_len} targets)")]
    MatchOutOfRange {
        est: usize,
        gt: usize,
        est_len: usize,
        gt_len: usize,
    },
    #[error("target {0} is matched more than once")]
    NotInjective(usize),
    #[error("detection probability {p} of estimate {index} is outside (0, 1]")]
    BadProbability { index: usize, p: f64 },
    #[error("estimate {index} yields an infinite cross-entropy term (p = {p})")]
    InfiniteLoss { index: usize, p: f64 },
    #[error("lambda must be finite and nonnegative, got {0}")]
    BadLambda(f64),
}

/// Dense `rows × cols` matrix of finite nonnegative costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AssignmentError> {
        if data.len() != rows * cols {
            return Err(AssignmentError::Ragged);
        }
        for (k, &v) in data.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(AssignmentError::BadCost {
                    row: k / cols.max(1),
                    col: k % cols.max(1),
                    value: v,
                });
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AssignmentError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AssignmentError::Ragged);
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    fn max_entry(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

/// Partial injective map from estimate index to target index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchMap {
    forward: BTreeMap<usize, usize>,
}

impl MatchMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds from `(est, gt)` pairs, checking injectivity and ranges.
    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (usize, usize)>,
        est_len: usize,
        gt_len: usize,
    ) -> Result<Self, AssignmentError> {
        let mut m = Self::new();
        let mut used = vec![false; gt_len];
        for (est, gt) in pairs {
            if est >= est_len || gt >= gt_len {
                return Err(AssignmentError::MatchOutOfRange {
                    est,
                    gt,
                    est_len,
                    gt_len,
                });
            }
            if used[gt] || m.forward.contains_key(&est) {
                return Err(AssignmentError::NotInjective(gt));
            }
            used[gt] = true;
            m.forward.insert(est, gt);
        }
        Ok(m)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            forward: (0..n).map(|i| (i, i)).collect(),
        }
    }

    /// `M(i)`: the target that estimate `i` is matched to.
    pub fn get(&self, est: usize) -> Option<usize> {
        self.forward.get(&est).copied()
    }

    /// `S(n)`: estimates matched to target `n` (at most one for a `MatchMap`).
    pub fn estimates_for(&self, gt: usize) -> Vec<usize> {
        self.forward
            .iter()
            .filter(|&(_, &g)| g == gt)
            .map(|(&e, _)| e)
            .collect()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.forward.iter().map(|(&e, &g)| (e, g))
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Dense `est -> Option<gt>` view.
    pub fn to_assignment(&self, est_len: usize) -> Vec<Option<usize>> {
        (0..est_len).map(|i| self.get(i)).collect()
    }

    pub fn total_cost(&self, costs: &CostMatrix) -> f64 {
        self.pairs().map(|(r, c)| costs.get(r, c)).sum()
    }

    pub fn check_against(&self, est_len: usize, gt_len: usize) -> Result<(), AssignmentError> {
        Self::from_pairs(self.pairs(), est_len, gt_len).map(|_| ())
    }
}

const NONE: usize = usize::MAX;

/// Minimum-cost assignment of size `min(rows, cols)`.
///
/// Rectangular inputs are zero-padded to square; padded matches are dropped.
/// Among optimal assignments the one whose padded row-to-column vector is
/// lexicographically smallest is returned.
pub fn hungarian(costs: &CostMatrix) -> MatchMap {
    if costs.is_empty() {
        return MatchMap::new();
    }
    let n = costs.rows.max(costs.cols);
    let cost = |r: usize, c: usize| {
        if r < costs.rows && c < costs.cols {
            costs.get(r, c)
        } else {
            0.0
        }
    };
    let (u, v, mut row_of_col) = solve_potentials(n, &cost);

    // Every optimal assignment is a perfect matching on the edges that are
    // tight under one optimal dual (complementary slackness).
    let eps = 1e-10 * costs.max_entry().max(f64::MIN_POSITIVE);
    let tight = |r: usize, c: usize| cost(r, c) - u[r] - v[c] <= eps;

    let mut col_of_row = vec![NONE; n];
    for (c, &r) in row_of_col.iter().enumerate() {
        col_of_row[r] = c;
    }
    for i in 0..n {
        for j in 0..n {
            if !tight(i, j) || row_of_col[j] < i {
                continue;
            }
            if col_of_row[i] == j {
                break;
            }
            let k = row_of_col[j];
            let j0 = col_of_row[i];
            col_of_row[i] = j;
            row_of_col[j] = i;
            row_of_col[j0] = NONE;
            col_of_row[k] = NONE;
            let saved_rows = col_of_row.clone();
            let saved_cols = row_of_col.clone();
            let mut seen = vec![false; n];
            if augment(
                k,
                i,
                j,
                n,
                &tight,
                &mut col_of_row,
                &mut row_of_col,
                &mut seen,
            ) {
                break;
            }
            col_of_row = saved_rows;
            row_of_col = saved_cols;
            col_of_row[i] = j0;
            row_of_col[j0] = i;
            row_of_col[j] = k;
            col_of_row[k] = j;
        }
    }

    MatchMap {
        forward: col_of_row
            .iter()
            .enumerate()
            .filter(|&(r, &c)| r < costs.rows && c < costs.cols)
            .map(|(r, &c)| (r, c))
            .collect(),
    }
}

/// Kuhn augmenting search from `row` over unfixed rows (> `fixed`) and
/// columns other than `blocked`.
#[allow(clippy::too_many_arguments)]
fn augment(
    row: usize,
    fixed: usize,
    blocked: usize,
    n: usize,
    tight: &impl Fn(usize, usize) -> bool,
    col_of_row: &mut [usize],
    row_of_col: &mut [usize],
    seen: &mut [bool],
) -> bool {
    for c in 0..n {
        if c == blocked || seen[c] || !tight(row, c) {
            continue;
        }
        let owner = row_of_col[c];
        if owner != NONE && owner <= fixed {
            continue;
        }
        seen[c] = true;
        if owner == NONE
            || augment(
                owner, fixed, blocked, n, tight, col_of_row, row_of_col, seen,
            )
        {
            row_of_col[c] = row;
            col_of_row[row] = c;
            return true;
        }
    }
    false
}

/// Shortest-augmenting-path Hungarian method. Returns row potentials, column
/// potentials, and the row assigned to each column.
fn solve_potentials(
    n: usize,
    cost: &impl Fn(usize, usize) -> f64,
) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    // 1-indexed internally; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
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
            for j in 0..=n {
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
    let row_u = u[1..].to_vec();
    let col_v = v[1..].to_vec();
    let row_of_col = p[1..].iter().map(|&r| r - 1).collect();
    (row_u, col_v, row_of_col)
}

/// L1 control-point cost matrix between estimates (rows) and targets (columns).
pub fn l1_cost_matrix(
    est: &[BezierCurve],
    gt: &[BezierCurve],
) -> Result<CostMatrix, AssignmentError> {
    let mut data = Vec::with_capacity(est.len() * gt.len());
    for e in est {
        for g in gt {
            data.push(e.l1_distance(g)?);
        }
    }
    CostMatrix::new(est.len(), gt.len(), data)
}

/// Hungarian matching on L1 control-point distance. Surplus rows or columns
/// stay unmatched.
pub fn match_lanes(est: &[BezierCurve], gt: &[BezierCurve]) -> Result<MatchMap, AssignmentError> {
    Ok(hungarian(&l1_cost_matrix(est, gt)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub l1: f64,
    pub lambda: f64,
    pub total: f64,
}

/// `L_CE + λ L_1` for one frame.
///
/// `L_1` is the mean control-point L1 distance over matched pairs. `L_CE`
/// averages `-ln p` over matched estimates and `-ln(1 - p)` over unmatched
/// ones (scored against the "no lane" class).
pub fn matching_loss(
    est: &[(BezierCurve, f64)],
    gt: &[BezierCurve],
    m: &MatchMap,
    lambda: f64,
) -> Result<LossBreakdown, AssignmentError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(AssignmentError::BadLambda(lambda));
    }
    m.check_against(est.len(), gt.len())?;
    let mut ce_sum = 0.0;
    for (index, &(_, p)) in est.iter().enumerate() {
        if !(p > 0.0 && p <= 1.0) {
            if p == 0.0 && m.get(index).is_some() {
                return Err(AssignmentError::InfiniteLoss { index, p });
            }
            return Err(AssignmentError::BadProbability { index, p });
        }
        let term = if m.get(index).is_some() {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        };
        if !term.is_finite() {
            return Err(AssignmentError::InfiniteLoss { index, p });
        }
        ce_sum += term;
    }
    let cross_entropy = if est.is_empty() {
        0.0
    } else {
        (ce_sum / est.len() as f64).max(0.0)
    };
    let mut l1_sum = 0.0;
    for (e, g) in m.pairs() {
        l1_sum += est[e].0.l1_distance(&gt[g])?;
    }
    let l1 = if m.is_empty() {
        0.0
    } else {
        l1_sum / m.len() as f64
    };
    Ok(LossBreakdown {
        cross_entropy,
        l1,
        lambda,
        total: cross_entropy + lambda * l1,
    })
}
