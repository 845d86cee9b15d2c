//! Cloud-side merge of per-vehicle lane maps into one global layer.
//!
//! All geometry lives in one tangent plane anchored at the first ingested
//! frame (heading 0, so x is east and y is north). An incoming lane merges
//! into the closest existing lane when their discrete Fréchet distance and
//! arclength overlap both pass the gates in [`MergeConfig`]; the merged
//! shape is the support-weighted pointwise mean after resampling the
//! incoming lane to the stored point count.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo_map::{
    project_points, unproject_positions, FrameMeta, GeoJsonError, GeoLaneMap, LaneFeature,
    DEFAULT_LANE_TYPE,
};
use crate::geometry::{GeometryError, Point2, Polyline, VehiclePose, DEFAULT_DEGREE};
use crate::transport::{decode_frame, TransportError};

/// Frames whose pose is farther than this from the anchor are rejected.
pub const MAX_REGION_RADIUS: f64 = 10_000.0;

/// Vehicle id reported on aggregated snapshots.
pub const AGGREGATE_VEHICLE_ID: &str = "aggregate";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregatorError {
    #[error(transparent)]
    Map(#[from] GeoJsonError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("frame is {distance:.1} m from the map anchor (limit {MAX_REGION_RADIUS} m)")]
    OutOfRegion { distance: f64 },
    #[error("invalid merge config: {0}")]
    BadConfig(String),
    #[error("invalid aggregator state: {0}")]
    State(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub match_distance: f64,
    pub resample_spacing: f64,
    pub min_overlap_fraction: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            match_distance: 1.0,
            resample_spacing: 0.25,
            min_overlap_fraction: 0.6,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<(), AggregatorError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.match_distance) || !positive(self.resample_spacing) {
            return Err(AggregatorError::BadConfig(
                "match_distance and resample_spacing must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.min_overlap_fraction) {
            return Err(AggregatorError::BadConfig(format!(
                "min_overlap_fraction {} outside [0, 1]",
                self.min_overlap_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Contribution {
    pub vehicle_id: String,
    pub frame_id: u64,
    pub lane_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalLane {
    pub id: u64,
    /// Representative polyline in the anchor plane.
    pub points: Vec<Point2>,
    pub support_count: u64,
    pub contributors: Vec<Contribution>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub latitude: f64,
    pub longitude: f64,
}

impl Anchor {
    pub fn pose(&self) -> VehiclePose {
        VehiclePose {
            latitude: self.latitude,
            longitude: self.longitude,
            heading: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubmissionKey {
    pub vehicle_id: String,
    pub frame_id: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalMap {
    pub anchor: Option<Anchor>,
    pub lanes: Vec<GlobalLane>,
    pub edges: BTreeSet<(u64, u64)>,
    pub submissions: BTreeSet<SubmissionKey>,
    pub next_lane_id: u64,
    pub latest_timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum IngestOutcome {
    Duplicate,
    Applied {
        new_lanes: usize,
        merged_lanes: usize,
        new_edges: usize,
    },
}

/// Arclength of the closest point of `line` to `p`.
fn project_arclength(line: &Polyline, p: Point2) -> f64 {
    let pts = line.points();
    let cum = line.cumulative_lengths();
    let mut best = (f64::INFINITY, 0.0);
    for (k, w) in pts.windows(2).enumerate() {
        let d = w[1] - w[0];
        let len2 = d.x * d.x + d.y * d.y;
        let t = (((p - w[0]).x * d.x + (p - w[0]).y * d.y) / len2).clamp(0.0, 1.0);
        let q = w[0] + d * t;
        let dist = q.distance(p);
        if dist < best.0 {
            best = (dist, cum[k] + t * (cum[k + 1] - cum[k]));
        }
    }
    best.1
}

/// Fraction of the longer lane covered by the stretch both lanes share.
pub fn overlap_fraction(a: &Polyline, b: &Polyline) -> f64 {
    let first = |l: &Polyline| l.points()[0];
    let last = |l: &Polyline| l.points()[l.len() - 1];
    let on_b = (project_arclength(b, last(a)) - project_arclength(b, first(a))).abs() / b.length();
    let on_a = (project_arclength(a, last(b)) - project_arclength(a, first(b))).abs() / a.length();
    on_a.min(on_b).min(1.0)
}

/// Discrete Fréchet distance between the vertex sequences of two polylines.
pub fn frechet_distance(a: &[Point2], b: &[Point2]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    let m = b.len();
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    for (i, &p) in a.iter().enumerate() {
        for j in 0..m {
            let d = p.distance(b[j]);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => cur[j - 1].max(d),
                (_, 0) => prev[0].max(d),
                _ => prev[j].min(prev[j - 1]).min(cur[j - 1]).max(d),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

impl GlobalMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lane(&self, id: u64) -> Option<&GlobalLane> {
        self.lanes.iter().find(|l| l.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }

    /// Parses and checks a saved state.
    pub fn from_json(text: &str) -> Result<Self, AggregatorError> {
        let state: Self =
            serde_json::from_str(text).map_err(|e| AggregatorError::State(e.to_string()))?;
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<(), AggregatorError> {
        let bad = |msg: String| Err(AggregatorError::State(msg));
        match self.anchor {
            Some(a) => a.pose().validate()?,
            None if !self.lanes.is_empty() => return bad("lanes without an anchor".into()),
            None => {}
        }
        let mut ids = BTreeSet::new();
        for lane in &self.lanes {
            if !ids.insert(lane.id) {
                return bad(format!("duplicate lane id {}", lane.id));
            }
            if lane.id >= self.next_lane_id {
                return bad(format!(
                    "lane id {} not below next_lane_id {}",
                    lane.id, self.next_lane_id
                ));
            }
            if lane.support_count == 0 {
                return bad(format!("lane {} has zero support", lane.id));
            }
            Polyline::from_points_dedup(lane.points.clone())?;
        }
        for &(a, b) in &self.edges {
            if a == b || !ids.contains(&a) || !ids.contains(&b) {
                return bad(format!("edge {a} -> {b} does not join two distinct lanes"));
            }
        }
        Ok(())
    }

    /// Merges one frame. Re-submitting a `(vehicle_id, frame_id)` pair is a no-op.
    pub fn ingest(
        &mut self,
        map: &GeoLaneMap,
        cfg: &MergeConfig,
    ) -> Result<IngestOutcome, AggregatorError> {
        cfg.validate()?;
        let meta = map.frame.as_ref().ok_or(GeoJsonError::MissingFrame)?;
        let key = SubmissionKey {
            vehicle_id: meta.vehicle_id.clone(),
            frame_id: meta.frame_id,
        };
        if self.submissions.contains(&key) {
            return Ok(IngestOutcome::Duplicate);
        }
        // Re-validate referential integrity for maps built in memory.
        let known: BTreeSet<u64> = map.features.iter().map(|f| f.lane_id).collect();
        for (k, [a, b]) in map.lane_edges.iter().enumerate() {
            for (slot, id) in [(0, a), (1, b)] {
                if !known.contains(id) {
                    return Err(GeoJsonError::DanglingEdge {
                        pointer: format!("/{k}/{slot}"),
                        lane_id: *id,
                    }
                    .into());
                }
            }
        }

        let anchor = self.anchor.unwrap_or(Anchor {
            latitude: meta.pose.latitude,
            longitude: meta.pose.longitude,
        });
        let plane = anchor.pose();
        plane.validate()?;
        let offset = plane.world_to_bev(meta.pose.latitude, meta.pose.longitude)?;
        let distance = offset.distance(Point2::new(0.0, 0.0));
        if distance > MAX_REGION_RADIUS {
            return Err(AggregatorError::OutOfRegion { distance });
        }

        let mut incoming = Vec::with_capacity(map.features.len());
        for f in &map.features {
            let line = unproject_positions(&plane, &f.coordinates)?;
            incoming.push(line.resample(cfg.resample_spacing)?);
        }

        // Decide every correspondence before touching geometry so that lanes
        // of one frame never see each other's updates.
        let existing: Vec<Polyline> = self
            .lanes
            .iter()
            .map(|l| Polyline::from_points_dedup(l.points.clone()))
            .collect::<Result<_, _>>()?;
        let mut claimed = BTreeSet::new();
        let mut targets = Vec::with_capacity(incoming.len());
        for line in &incoming {
            let start = line.points()[0];
            let end = line.points()[line.len() - 1];
            let mut best: Option<(f64, usize)> = None;
            for (k, g) in existing.iter().enumerate() {
                if claimed.contains(&k) {
                    continue;
                }
                let gp = g.points();
                // Endpoint distances bound the Fréchet distance from below.
                if start.distance(gp[0]) > cfg.match_distance
                    || end.distance(gp[gp.len() - 1]) > cfg.match_distance
                {
                    continue;
                }
                let d = frechet_distance(line.points(), gp);
                if d > cfg.match_distance || overlap_fraction(line, g) < cfg.min_overlap_fraction {
                    continue;
                }
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, k));
                }
            }
            if let Some((_, k)) = best {
                claimed.insert(k);
            }
            targets.push(best.map(|(_, k)| k));
        }

        let mut lane_map = BTreeMap::new();
        let (mut new_lanes, mut merged_lanes) = (0, 0);
        for ((f, line), target) in map.features.iter().zip(&incoming).zip(targets) {
            let contribution = Contribution {
                vehicle_id: meta.vehicle_id.clone(),
                frame_id: meta.frame_id,
                lane_id: f.lane_id,
            };
            match target {
                Some(k) => {
                    let lane = &mut self.lanes[k];
                    let aligned = line.resample_count(existing[k].len());
                    let w = lane.support_count as f64;
                    lane.points = existing[k]
                        .points()
                        .iter()
                        .zip(&aligned)
                        .map(|(&old, &new)| (old * w + new) * (1.0 / (w + 1.0)))
                        .collect();
                    lane.support_count += 1;
                    lane.contributors.push(contribution);
                    lane.contributors.sort();
                    lane_map.insert(f.lane_id, lane.id);
                    merged_lanes += 1;
                }
                None => {
                    let id = self.next_lane_id;
                    self.next_lane_id += 1;
                    self.lanes.push(GlobalLane {
                        id,
                        points: line.points().to_vec(),
                        support_count: 1,
                        contributors: vec![contribution],
                    });
                    lane_map.insert(f.lane_id, id);
                    new_lanes += 1;
                }
            }
        }

        let mut new_edges = 0;
        for [a, b] in &map.lane_edges {
            let (ga, gb) = (lane_map[a], lane_map[b]);
            if ga != gb && self.edges.insert((ga, gb)) {
                new_edges += 1;
            }
        }

        self.anchor = Some(anchor);
        self.submissions.insert(key);
        self.latest_timestamp = self.latest_timestamp.max(meta.timestamp);
        Ok(IngestOutcome::Applied {
            new_lanes,
            merged_lanes,
            new_edges,
        })
    }

    /// Deterministic GeoJSON export, lanes in id order.
    pub fn snapshot(&self) -> Result<GeoLaneMap, AggregatorError> {
        let Some(anchor) = self.anchor else {
            return Ok(GeoLaneMap::default());
        };
        let pose = anchor.pose();
        let revision = self.submissions.len() as u64;
        let mut lanes: Vec<&GlobalLane> = self.lanes.iter().collect();
        lanes.sort_by_key(|l| l.id);
        let mut features = Vec::with_capacity(lanes.len());
        for lane in lanes {
            let line = Polyline::from_points_dedup(lane.points.clone())?;
            let curvature = line
                .fit_bezier(DEFAULT_DEGREE.min(line.len() - 1))
                .and_then(|c| c.curvature_at(0.5))
                .unwrap_or(0.0);
            features.push(LaneFeature {
                lane_id: lane.id,
                lane_type: DEFAULT_LANE_TYPE.to_string(),
                curvature,
                frame_id: revision,
                vehicle_id: AGGREGATE_VEHICLE_ID.to_string(),
                support_count: Some(lane.support_count),
                coordinates: project_points(&pose, &lane.points)?,
            });
        }
        Ok(GeoLaneMap {
            frame: Some(FrameMeta {
                vehicle_id: AGGREGATE_VEHICLE_ID.to_string(),
                frame_id: revision,
                timestamp: self.latest_timestamp,
                pose,
            }),
            features,
            lane_edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
        })
    }
}

/// Thread-safe ingress point. Writers are serialized; readers get a
/// consistent point-in-time view without blocking ingestion.
#[derive(Debug, Default)]
pub struct AggregatorService {
    state: RwLock<Arc<GlobalMap>>,
    writer: Mutex<()>,
    cfg: MergeConfig,
}

impl AggregatorService {
    pub fn new(cfg: MergeConfig) -> Result<Self, AggregatorError> {
        cfg.validate()?;
        Ok(Self::with_state(GlobalMap::new(), cfg))
    }

    pub fn with_state(state: GlobalMap, cfg: MergeConfig) -> Self {
        Self {
            state: RwLock::new(Arc::new(state)),
            writer: Mutex::new(()),
            cfg,
        }
    }

    /// Decodes a V2X frame and merges it.
    pub fn ingest_frame(&self, bytes: &[u8]) -> Result<IngestOutcome, AggregatorError> {
        let map = decode_frame(bytes)?;
        self.ingest_map(&map)
    }

    pub fn ingest_map(&self, map: &GeoLaneMap) -> Result<IngestOutcome, AggregatorError> {
        let _guard = self.writer.lock();
        let mut next = GlobalMap::clone(&self.state.read());
        let outcome = next.ingest(map, &self.cfg)?;
        if outcome != IngestOutcome::Duplicate {
            *self.state.write() = Arc::new(next);
        }
        Ok(outcome)
    }

    pub fn state(&self) -> Arc<GlobalMap> {
        Arc::clone(&self.state.read())
    }

    pub fn snapshot(&self) -> Result<GeoLaneMap, AggregatorError> {
        self.state().snapshot()
    }
}
