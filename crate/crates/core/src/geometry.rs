//! Bézier centerline geometry: evaluation, arc-length sampling, least-squares
//! fitting, curvature, and the BEV to WGS84 projection.
//!
//! A curve of degree `n` carries `n + 1` control points indexed `0..=n`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default Bézier degree for lane centerlines.
pub const DEFAULT_DEGREE: usize = 3;

/// Default resampling resolution (meters), matching a 25 cm BEV grid.
pub const DEFAULT_SPACING: f64 = 0.25;

/// Relative tolerance for adaptive chord subdivision.
const CHORD_TOLERANCE: f64 = 1e-6;

const MAX_SUBDIVISION_DEPTH: u32 = 24;

/// WGS84 semi-major axis (meters).
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("parameter t = {0} outside [0, 1]")]
    ParameterOutOfRange(f64),
    #[error("a Bézier curve needs at least 2 control points, got {0}")]
    TooFewControlPoints(usize),
    #[error("non-finite coordinate in {0}")]
    NonFinite(&'static str),
    #[error("spacing must be positive, got {0}")]
    NonPositiveSpacing(f64),
    #[error("degree mismatch: {0} vs {1}")]
    DegreeMismatch(usize, usize),
    #[error("need at least {needed} points to fit degree {degree}, got {got}")]
    TooFewPoints {
        degree: usize,
        needed: usize,
        got: usize,
    },
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("polyline needs at least 2 points, got {0}")]
    ShortPolyline(usize),
    #[error("polyline has coincident consecutive points at index {0}")]
    CoincidentPoints(usize),
    #[error("vanishing tangent at t = {0}")]
    Cusp(f64),
    #[error("invalid pose: latitude {lat}, longitude {lon}")]
    InvalidPose { lat: f64, lon: f64 },
    #[error("projection singular near the pole (latitude {0})")]
    PolarSingularity(f64),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// A point in the BEV plane: `x` to the right (east), `y` forward (north).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(self, other: Point2, t: f64) -> Point2 {
        Point2::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }

    /// Euclidean distance to the segment `[a, b]`.
    pub fn distance_to_segment(self, a: Point2, b: Point2) -> f64 {
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let len2 = dx * dx + dy * dy;
        if len2 == 0.0 {
            return self.distance(a);
        }
        let t = (((self.x - a.x) * dx + (self.y - a.y) * dy) / len2).clamp(0.0, 1.0);
        self.distance(Point2::new(a.x + t * dx, a.y + t * dy))
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// Binomial coefficient as a float; exact for the degrees used here.
fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn bernstein(n: usize, k: usize, t: f64) -> f64 {
    binomial(n, k) * (1.0 - t).powi((n - k) as i32) * t.powi(k as i32)
}

fn check_unit(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(GeometryError::ParameterOutOfRange(t))
    }
}

/// One lane centerline as a Bézier curve with a fixed number of control points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BezierCurve {
    control_points: Vec<Point2>,
}

impl BezierCurve {
    pub fn new(control_points: Vec<Point2>) -> Result<Self> {
        if control_points.len() < 2 {
            return Err(GeometryError::TooFewControlPoints(control_points.len()));
        }
        if !control_points.iter().all(|p| p.is_finite()) {
            return Err(GeometryError::NonFinite("control points"));
        }
        Ok(Self { control_points })
    }

    /// Builds a curve without the finiteness check. Only meant for producing
    /// malformed graphs to exercise validation.
    pub fn new_unchecked(control_points: Vec<Point2>) -> Self {
        Self { control_points }
    }

    pub fn from_xy(points: &[(f64, f64)]) -> Result<Self> {
        Self::new(points.iter().map(|&(x, y)| Point2::new(x, y)).collect())
    }

    pub fn control_points(&self) -> &[Point2] {
        &self.control_points
    }

    pub fn degree(&self) -> usize {
        self.control_points.len() - 1
    }

    pub fn is_finite(&self) -> bool {
        self.control_points.iter().all(|p| p.is_finite())
    }

    pub fn start(&self) -> Point2 {
        self.control_points[0]
    }

    pub fn end(&self) -> Point2 {
        self.control_points[self.degree()]
    }

    /// Evaluates the Bernstein form at `t ∈ [0, 1]`.
    pub fn eval(&self, t: f64) -> Result<Point2> {
        check_unit(t)?;
        Ok(self.eval_unchecked(t))
    }

    fn eval_unchecked(&self, t: f64) -> Point2 {
        // Endpoints are returned verbatim so interpolation is exact.
        if t == 0.0 {
            return self.start();
        }
        if t == 1.0 {
            return self.end();
        }
        let n = self.degree();
        self.control_points
            .iter()
            .enumerate()
            .fold(Point2::default(), |acc, (k, &p)| {
                acc + p * bernstein(n, k, t)
            })
    }

    /// Control points of the `order`-th hodograph (derivative curve), scaled
    /// so that evaluating them as a Bézier curve yields the derivative.
    fn hodograph(points: &[Point2], order: usize) -> Vec<Point2> {
        let mut pts = points.to_vec();
        for _ in 0..order {
            let n = pts.len() - 1;
            if n == 0 {
                return vec![Point2::default()];
            }
            pts = pts.windows(2).map(|w| (w[1] - w[0]) * n as f64).collect();
        }
        pts
    }

    fn eval_points(points: &[Point2], t: f64) -> Point2 {
        let n = points.len() - 1;
        points
            .iter()
            .enumerate()
            .fold(Point2::default(), |acc, (k, &p)| {
                acc + p * bernstein(n, k, t)
            })
    }

    /// First derivative `B'(t)`.
    pub fn derivative(&self, t: f64) -> Result<Point2> {
        check_unit(t)?;
        Ok(Self::eval_points(
            &Self::hodograph(&self.control_points, 1),
            t,
        ))
    }

    /// Second derivative `B''(t)`.
    pub fn second_derivative(&self, t: f64) -> Result<Point2> {
        check_unit(t)?;
        Ok(Self::eval_points(
            &Self::hodograph(&self.control_points, 2),
            t,
        ))
    }

    /// Splits at `t` via de Casteljau, returning the `[0, t]` and `[t, 1]` halves.
    pub fn split(&self, t: f64) -> Result<(BezierCurve, BezierCurve)> {
        check_unit(t)?;
        let (l, r) = split_points(&self.control_points, t);
        Ok((Self { control_points: l }, Self { control_points: r }))
    }

    /// Signed curvature `(x'y'' - y'x'') / (x'^2 + y'^2)^{3/2}`. Degree-1 curves
    /// are straight and report zero.
    pub fn curvature_at(&self, t: f64) -> Result<f64> {
        check_unit(t)?;
        if self.degree() < 2 {
            return Ok(0.0);
        }
        let d1 = self.derivative(t)?;
        let d2 = self.second_derivative(t)?;
        let speed2 = d1.x * d1.x + d1.y * d1.y;
        let scale = self.control_polygon_length().max(f64::MIN_POSITIVE);
        if speed2.sqrt() <= 1e-12 * scale {
            return Err(GeometryError::Cusp(t));
        }
        Ok((d1.x * d2.y - d1.y * d2.x) / speed2.powf(1.5))
    }

    pub fn control_polygon_length(&self) -> f64 {
        polygon_length(&self.control_points)
    }

    /// Total arc length from adaptive chord subdivision.
    pub fn arc_length(&self) -> f64 {
        self.arc_segments().iter().map(|s| s.length).sum()
    }

    /// Adaptive chord subdivision: leaves are split until chord and control
    /// polygon agree within the relative tolerance. Each leaf carries its
    /// parameter interval and an arc-length estimate.
    fn arc_segments(&self) -> Vec<ArcSegment> {
        let mut out = Vec::new();
        subdivide(&self.control_points, 0.0, 1.0, 0, &mut out);
        out
    }

    /// Samples the curve at uniform arc-length steps no longer than `spacing`.
    /// The first and last samples are the curve endpoints.
    pub fn sample(&self, spacing: f64) -> Result<Polyline> {
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(GeometryError::NonPositiveSpacing(spacing));
        }
        let segments = self.arc_segments();
        let total: f64 = segments.iter().map(|s| s.length).sum();
        if total <= 0.0 {
            return Err(GeometryError::Degenerate("zero-length curve"));
        }
        let count = (total / spacing).ceil().max(1.0) as usize;
        let step = total / count as f64;
        let hodo = Self::hodograph(&self.control_points, 1);

        let mut points = Vec::with_capacity(count + 1);
        points.push(self.start());
        let mut seg_idx = 0;
        let mut seg_base = 0.0;
        for k in 1..count {
            let target = step * k as f64;
            while seg_idx + 1 < segments.len() && seg_base + segments[seg_idx].length < target {
                seg_base += segments[seg_idx].length;
                seg_idx += 1;
            }
            let seg = &segments[seg_idx];
            let t = invert_arc_length(&hodo, seg, target - seg_base);
            points.push(self.eval_unchecked(t));
        }
        points.push(self.end());
        // Consecutive samples are distinct because step > 0 and the speed is
        // nonzero almost everywhere; collapse any that are not.
        points.dedup_by(|b, a| a.distance(*b) == 0.0);
        if points.len() < 2 {
            return Err(GeometryError::Degenerate("zero-length curve"));
        }
        Ok(Polyline { points })
    }

    /// Sum of per-coordinate absolute differences between control points.
    pub fn l1_distance(&self, other: &BezierCurve) -> Result<f64> {
        if self.degree() != other.degree() {
            return Err(GeometryError::DegreeMismatch(self.degree(), other.degree()));
        }
        Ok(self
            .control_points
            .iter()
            .zip(&other.control_points)
            .map(|(a, b)| (a.x - b.x).abs() + (a.y - b.y).abs())
            .sum())
    }

    /// Applies `f` to every control point. Bézier curves are affine invariant,
    /// so this is exact for affine `f`.
    pub fn map_points(&self, f: impl Fn(Point2) -> Point2) -> Result<BezierCurve> {
        BezierCurve::new(self.control_points.iter().map(|&p| f(p)).collect())
    }

    pub fn reversed(&self) -> BezierCurve {
        let mut control_points = self.control_points.clone();
        control_points.reverse();
        Self { control_points }
    }
}

impl<'de> Deserialize<'de> for BezierCurve {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            control_points: Vec<Point2>,
        }
        let raw = Raw::deserialize(d)?;
        BezierCurve::new(raw.control_points).map_err(serde::de::Error::custom)
    }
}

fn polygon_length(points: &[Point2]) -> f64 {
    points.windows(2).map(|w| w[0].distance(w[1])).sum()
}

fn split_points(points: &[Point2], t: f64) -> (Vec<Point2>, Vec<Point2>) {
    let n = points.len();
    let mut work = points.to_vec();
    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    left.push(work[0]);
    right.push(work[n - 1]);
    for level in 1..n {
        for i in 0..n - level {
            work[i] = work[i].lerp(work[i + 1], t);
        }
        left.push(work[0]);
        right.push(work[n - level - 1]);
    }
    right.reverse();
    (left, right)
}

#[derive(Debug, Clone, Copy)]
struct ArcSegment {
    t0: f64,
    t1: f64,
    length: f64,
}

fn subdivide(points: &[Point2], t0: f64, t1: f64, depth: u32, out: &mut Vec<ArcSegment>) {
    let chord = points[0].distance(points[points.len() - 1]);
    let polygon = polygon_length(points);
    if polygon - chord <= CHORD_TOLERANCE * polygon || depth >= MAX_SUBDIVISION_DEPTH {
        // Gravesen's estimate; exact for straight control polygons.
        let n = (points.len() - 1) as f64;
        let length = (2.0 * chord + (n - 1.0) * polygon) / (n + 1.0);
        out.push(ArcSegment { t0, t1, length });
        return;
    }
    let (l, r) = split_points(points, 0.5);
    let mid = 0.5 * (t0 + t1);
    subdivide(&l, t0, mid, depth + 1, out);
    subdivide(&r, mid, t1, depth + 1, out);
}

const GAUSS_NODES: [f64; 5] = [
    0.0,
    -0.538_469_310_105_683_1,
    0.538_469_310_105_683_1,
    -0.906_179_845_938_664,
    0.906_179_845_938_664,
];
const GAUSS_WEIGHTS: [f64; 5] = [
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_47,
    0.478_628_670_499_366_47,
    0.236_926_885_056_189_08,
    0.236_926_885_056_189_08,
];

fn speed(hodo: &[Point2], t: f64) -> f64 {
    let d = BezierCurve::eval_points(hodo, t);
    d.x.hypot(d.y)
}

fn gauss_length(hodo: &[Point2], a: f64, b: f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    GAUSS_NODES
        .iter()
        .zip(GAUSS_WEIGHTS)
        .map(|(&x, w)| w * speed(hodo, mid + half * x))
        .sum::<f64>()
        * half
}

/// Finds `t` in the segment whose arc length from `seg.t0` equals `target`,
/// rescaled so the segment's quadrature length matches its leaf estimate.
fn invert_arc_length(hodo: &[Point2], seg: &ArcSegment, target: f64) -> f64 {
    let quad_total = gauss_length(hodo, seg.t0, seg.t1);
    if quad_total <= 0.0 {
        return seg.t0;
    }
    let goal = (target / seg.length).clamp(0.0, 1.0) * quad_total;
    let (mut lo, mut hi) = (seg.t0, seg.t1);
    let mut t = seg.t0 + (seg.t1 - seg.t0) * (goal / quad_total);
    for _ in 0..60 {
        let f = gauss_length(hodo, seg.t0, t) - goal;
        if f.abs() <= 1e-13 * quad_total.max(1.0) {
            break;
        }
        if f > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let v = speed(hodo, t);
        let newton = t - f / v;
        t = if v > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    t
}

/// An ordered point sequence with distinct consecutive points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct Polyline {
    points: Vec<Point2>,
}

impl TryFrom<Vec<Point2>> for Polyline {
    type Error = GeometryError;
    fn try_from(points: Vec<Point2>) -> Result<Self> {
        Polyline::new(points)
    }
}

impl From<Polyline> for Vec<Point2> {
    fn from(p: Polyline) -> Self {
        p.points
    }
}

impl Polyline {
    pub fn new(points: Vec<Point2>) -> Result<Self> {
        if points.len() < 2 {
            return Err(GeometryError::ShortPolyline(points.len()));
        }
        if !points.iter().all(|p| p.is_finite()) {
            return Err(GeometryError::NonFinite("polyline"));
        }
        if let Some(i) = points.windows(2).position(|w| w[0] == w[1]) {
            return Err(GeometryError::CoincidentPoints(i + 1));
        }
        Ok(Self { points })
    }

    /// Builds a polyline, silently dropping repeated consecutive points.
    pub fn from_points_dedup(mut points: Vec<Point2>) -> Result<Self> {
        points.dedup();
        Self::new(points)
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn length(&self) -> f64 {
        polygon_length(&self.points)
    }

    /// Cumulative arc length at every vertex, starting at 0.
    pub fn cumulative_lengths(&self) -> Vec<f64> {
        let mut acc = 0.0;
        std::iter::once(0.0)
            .chain(self.points.windows(2).map(|w| {
                acc += w[0].distance(w[1]);
                acc
            }))
            .collect()
    }

    /// Shortest distance from `p` to any segment.
    pub fn distance_to_point(&self, p: Point2) -> f64 {
        self.points
            .windows(2)
            .map(|w| p.distance_to_segment(w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Point at arc length `s`, clamped to the ends.
    pub fn point_at_length(&self, s: f64) -> Point2 {
        let cum = self.cumulative_lengths();
        let total = *cum.last().unwrap();
        if s <= 0.0 {
            return self.points[0];
        }
        if s >= total {
            return *self.points.last().unwrap();
        }
        let i = cum.partition_point(|&c| c <= s).saturating_sub(1);
        let seg = cum[i + 1] - cum[i];
        self.points[i].lerp(self.points[i + 1], (s - cum[i]) / seg)
    }

    /// Resamples to exactly `count ≥ 2` points at uniform arc-length steps.
    pub fn resample_count(&self, count: usize) -> Vec<Point2> {
        let count = count.max(2);
        let total = self.length();
        (0..count)
            .map(|k| {
                if k + 1 == count {
                    *self.points.last().unwrap()
                } else {
                    self.point_at_length(total * k as f64 / (count - 1) as f64)
                }
            })
            .collect()
    }

    /// Resamples at uniform arc-length steps no longer than `spacing`.
    pub fn resample(&self, spacing: f64) -> Result<Polyline> {
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(GeometryError::NonPositiveSpacing(spacing));
        }
        let segments = (self.length() / spacing).ceil().max(1.0) as usize;
        Polyline::from_points_dedup(self.resample_count(segments + 1))
    }

    /// Least-squares Bézier fit; see [`fit_bezier`].
    pub fn fit_bezier(&self, degree: usize) -> Result<BezierCurve> {
        fit_bezier(self, degree)
    }
}

const FIT_WARM_START_ROUNDS: usize = 4;
const FIT_MAX_ITERATIONS: usize = 200;

/// Fits a Bézier curve of `degree` to `line` by least squares on the
/// Bernstein basis with endpoints clamped to the polyline's endpoints.
///
/// Parameters start from chord-length values and a few rounds of point
/// projection. Control points and parameters are then refined jointly by
/// damped Gauss-Newton, so exact samples of a Bézier curve are recovered to
/// high precision.
pub fn fit_bezier(line: &Polyline, degree: usize) -> Result<BezierCurve> {
    if degree < 1 {
        return Err(GeometryError::TooFewControlPoints(degree + 1));
    }
    let pts = line.points();
    if pts.len() < degree + 1 {
        return Err(GeometryError::TooFewPoints {
            degree,
            needed: degree + 1,
            got: pts.len(),
        });
    }
    let total = line.length();
    let extent = pts.iter().map(|p| p.distance(pts[0])).fold(0.0, f64::max);
    if total <= 0.0 || extent <= 1e-12 * (1.0 + pts[0].x.abs().max(pts[0].y.abs())) {
        return Err(GeometryError::Degenerate("all points coincide"));
    }
    let first = pts[0];
    let last = pts[pts.len() - 1];
    if degree == 1 {
        return BezierCurve::new(vec![first, last]);
    }

    let mut params: Vec<f64> = line
        .cumulative_lengths()
        .iter()
        .map(|s| s / total)
        .collect();
    let mut curve = solve_clamped(pts, &params, degree)?;
    for _ in 0..FIT_WARM_START_ROUNDS {
        let refined = reparameterize(&curve, pts, &params);
        let candidate = solve_clamped(pts, &refined, degree)?;
        if rms_residual(&candidate, pts, &refined) > rms_residual(&curve, pts, &params) {
            break;
        }
        curve = candidate;
        params = refined;
    }
    Ok(refine_jointly(curve, params, pts, total))
}

fn sum_squares(curve: &BezierCurve, pts: &[Point2], params: &[f64]) -> f64 {
    pts.iter()
        .zip(params)
        .map(|(p, &t)| {
            let q = curve.eval_unchecked(t) - *p;
            q.x * q.x + q.y * q.y
        })
        .sum()
}

/// Levenberg-Marquardt over interior control points and interior parameters.
/// Each parameter touches only its own residual, so the parameter block of
/// the normal equations is diagonal and is eliminated by a Schur complement.
fn refine_jointly(
    mut curve: BezierCurve,
    mut params: Vec<f64>,
    pts: &[Point2],
    total: f64,
) -> BezierCurve {
    let n = curve.degree();
    let inner = n - 1;
    let dim = 2 * inner;
    let last = pts.len() - 1;
    let mut cost = sum_squares(&curve, pts, &params);
    let mut lambda = 1e-3;
    let floor = (1e-15 * total).powi(2) * pts.len() as f64;
    for _ in 0..FIT_MAX_ITERATIONS {
        if cost <= floor {
            break;
        }
        let d1 = BezierCurve::hodograph(curve.control_points(), 1);
        let mut a = DMatrix::<f64>::zeros(dim, dim);
        let mut grad_c = DVector::<f64>::zeros(dim);
        // Per interior point: basis column, tangent, residual.
        let mut rows = Vec::with_capacity(pts.len());
        for (i, (&t, &p)) in params.iter().zip(pts).enumerate() {
            let b: Vec<f64> = (1..n).map(|k| bernstein(n, k, t)).collect();
            let r = curve.eval_unchecked(t) - p;
            for k in 0..inner {
                grad_c[k] += b[k] * r.x;
                grad_c[inner + k] += b[k] * r.y;
                for l in 0..inner {
                    a[(k, l)] += b[k] * b[l];
                    a[(inner + k, inner + l)] += b[k] * b[l];
                }
            }
            if i != 0 && i != last {
                let g = BezierCurve::eval_points(&d1, t);
                rows.push((i, b, g, r));
            }
        }
        let step = loop {
            let mut s = a.clone();
            for k in 0..dim {
                s[(k, k)] += lambda * a[(k, k)].max(1e-12);
            }
            let mut rhs = -grad_c.clone();
            let mut scaled = Vec::with_capacity(rows.len());
            for (_, b, g, r) in &rows {
                let di = (g.x * g.x + g.y * g.y) * (1.0 + lambda) + 1e-300;
                let gt = g.x * r.x + g.y * r.y;
                let mut e = DVector::<f64>::zeros(dim);
                for k in 0..inner {
                    e[k] = b[k] * g.x;
                    e[inner + k] = b[k] * g.y;
                }
                s -= &e * e.transpose() / di;
                rhs += &e * (gt / di);
                scaled.push((e, gt, di));
            }
            let Some(dc) = s.lu().solve(&rhs) else {
                lambda *= 10.0;
                if lambda > 1e12 {
                    break None;
                }
                continue;
            };
            let mut cps = curve.control_points().to_vec();
            for k in 0..inner {
                cps[k + 1] = cps[k + 1] + Point2::new(dc[k], dc[inner + k]);
            }
            let mut next = params.clone();
            for ((i, ..), (e, gt, di)) in rows.iter().zip(&scaled) {
                let dt = (-gt - e.dot(&dc)) / di;
                next[*i] = (params[*i] + dt).clamp(0.0, 1.0);
            }
            let candidate = BezierCurve::new_unchecked(cps);
            let c = sum_squares(&candidate, pts, &next);
            if c.is_finite() && c < cost {
                lambda = (lambda / 3.0).max(1e-12);
                break Some((candidate, next, c));
            }
            lambda *= 4.0;
            if lambda > 1e12 {
                break None;
            }
        };
        let Some((candidate, next, c)) = step else {
            break;
        };
        let gain = cost - c;
        curve = candidate;
        params = next;
        cost = c;
        // Progress this slow means a flat valley, typically a nearly straight
        // lane whose control points can slide along the tangent.
        if gain <= 1e-6 * cost {
            break;
        }
    }
    curve
}

fn rms_residual(curve: &BezierCurve, pts: &[Point2], params: &[f64]) -> f64 {
    let sum: f64 = pts
        .iter()
        .zip(params)
        .map(|(p, &t)| {
            let q = curve.eval_unchecked(t);
            (q.x - p.x).powi(2) + (q.y - p.y).powi(2)
        })
        .sum();
    (sum / pts.len() as f64).sqrt()
}

fn reparameterize(curve: &BezierCurve, pts: &[Point2], params: &[f64]) -> Vec<f64> {
    let d1 = BezierCurve::hodograph(curve.control_points(), 1);
    let d2 = BezierCurve::hodograph(curve.control_points(), 2);
    let last = params.len() - 1;
    params
        .iter()
        .zip(pts)
        .enumerate()
        .map(|(i, (&t, &p))| {
            if i == 0 || i == last {
                return t;
            }
            let q = curve.eval_unchecked(t) - p;
            let a = BezierCurve::eval_points(&d1, t);
            let b = BezierCurve::eval_points(&d2, t);
            let num = q.x * a.x + q.y * a.y;
            let den = a.x * a.x + a.y * a.y + q.x * b.x + q.y * b.y;
            if den.abs() < 1e-300 {
                t
            } else {
                (t - num / den).clamp(0.0, 1.0)
            }
        })
        .collect()
}

fn solve_clamped(pts: &[Point2], params: &[f64], degree: usize) -> Result<BezierCurve> {
    let first = pts[0];
    let last = pts[pts.len() - 1];
    let inner = degree - 1;
    let rows = pts.len();
    let mut a = DMatrix::<f64>::zeros(rows, inner);
    let mut bx = DVector::<f64>::zeros(rows);
    let mut by = DVector::<f64>::zeros(rows);
    for (r, (&t, &p)) in params.iter().zip(pts).enumerate() {
        for k in 1..degree {
            a[(r, k - 1)] = bernstein(degree, k, t);
        }
        let b0 = bernstein(degree, 0, t);
        let bn = bernstein(degree, degree, t);
        bx[r] = p.x - b0 * first.x - bn * last.x;
        by[r] = p.y - b0 * first.y - bn * last.y;
    }
    let svd = a.svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if !(max_sv > 0.0) || min_sv <= 1e-12 * max_sv {
        return Err(GeometryError::Degenerate("rank-deficient fitting system"));
    }
    let eps = 1e-14 * max_sv;
    let sx = svd
        .solve(&bx, eps)
        .map_err(|_| GeometryError::Degenerate("least-squares solve failed"))?;
    let sy = svd
        .solve(&by, eps)
        .map_err(|_| GeometryError::Degenerate("least-squares solve failed"))?;
    let mut cps = Vec::with_capacity(degree + 1);
    cps.push(first);
    cps.extend((0..inner).map(|k| Point2::new(sx[k], sy[k])));
    cps.push(last);
    BezierCurve::new(cps)
}

/// Vehicle localization in WGS84. Heading is in radians, clockwise from true
/// north, so a heading of zero aligns BEV `y` with north.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehiclePose {
    pub latitude: f64,
    pub longitude: f64,
    pub heading: f64,
}

impl VehiclePose {
    pub fn new(latitude: f64, longitude: f64, heading: f64) -> Result<Self> {
        let pose = Self {
            latitude,
            longitude,
            heading,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.latitude.is_finite()
            && self.longitude.is_finite()
            && self.heading.is_finite()
            && self.latitude.abs() <= 90.0
            && self.longitude.abs() <= 180.0;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidPose {
                lat: self.latitude,
                lon: self.longitude,
            })
        }
    }

    /// Meridian and prime-vertical radii of curvature at the pose latitude.
    fn radii(&self) -> Result<(f64, f64, f64)> {
        self.validate()?;
        let phi = self.latitude.to_radians();
        let cos_phi = phi.cos();
        if cos_phi < 1e-9 {
            return Err(GeometryError::PolarSingularity(self.latitude));
        }
        let e2 = WGS84_F * (2.0 - WGS84_F);
        let w2 = 1.0 - e2 * phi.sin().powi(2);
        let meridian = WGS84_A * (1.0 - e2) / w2.powf(1.5);
        let normal = WGS84_A / w2.sqrt();
        Ok((meridian, normal, cos_phi))
    }

    /// Rotates a BEV point into east/north offsets (meters).
    pub fn bev_to_east_north(&self, p: Point2) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (p.x * c + p.y * s, -p.x * s + p.y * c)
    }

    pub fn east_north_to_bev(&self, east: f64, north: f64) -> Point2 {
        let (s, c) = self.heading.sin_cos();
        Point2::new(east * c - north * s, east * s + north * c)
    }

    /// Projects a BEV point to `(latitude, longitude)` in degrees using the
    /// local tangent plane at the pose.
    pub fn bev_to_world(&self, p: Point2) -> Result<(f64, f64)> {
        let (meridian, normal, cos_phi) = self.radii()?;
        if p.x == 0.0 && p.y == 0.0 {
            return Ok((self.latitude, self.longitude));
        }
        let (east, north) = self.bev_to_east_north(p);
        let lat = self.latitude + (north / meridian).to_degrees();
        let lon = self.longitude + (east / (normal * cos_phi)).to_degrees();
        Ok((lat, lon))
    }

    /// Exact inverse of [`VehiclePose::bev_to_world`].
    pub fn world_to_bev(&self, latitude: f64, longitude: f64) -> Result<Point2> {
        let (meridian, normal, cos_phi) = self.radii()?;
        let north = (latitude - self.latitude).to_radians() * meridian;
        let mut dlon = longitude - self.longitude;
        if dlon > 180.0 {
            dlon -= 360.0;
        } else if dlon < -180.0 {
            dlon += 360.0;
        }
        let east = dlon.to_radians() * normal * cos_phi;
        Ok(self.east_north_to_bev(east, north))
    }
}

/// Free-function form of [`BezierCurve::eval`].
pub fn bezier_eval(curve: &BezierCurve, t: f64) -> Result<Point2> {
    curve.eval(t)
}

/// Free-function form of [`BezierCurve::sample`].
pub fn bezier_sample(curve: &BezierCurve, spacing: f64) -> Result<Polyline> {
    curve.sample(spacing)
}

pub fn curvature_at(curve: &BezierCurve, t: f64) -> Result<f64> {
    curve.curvature_at(t)
}

pub fn bev_to_world(pose: &VehiclePose, p: Point2) -> Result<(f64, f64)> {
    pose.bev_to_world(p)
}

pub fn l1_control_distance(a: &BezierCurve, b: &BezierCurve) -> Result<f64> {
    a.l1_distance(b)
}
