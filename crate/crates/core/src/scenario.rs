//! Synthetic multi-vehicle scenes and the end-to-end simulation pipeline.
//!
//! World geometry lives in the tangent plane of `origin` (x east, y north).
//! Each vehicle pose is placed in that plane and converted to WGS84; every
//! frame then sees the world lanes lying entirely within its visibility
//! radius, expressed in the vehicle's own BEV frame and optionally perturbed
//! by Gaussian noise on the control points.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::{AggregatorService, GlobalMap, IngestOutcome, MergeConfig};
use crate::geo_map::{geojson_to_graph_in_frame, graph_to_geojson, FrameMeta, GeoLaneMap};
use crate::geometry::{BezierCurve, Point2, VehiclePose, DEFAULT_DEGREE, DEFAULT_SPACING};
use crate::graph::{LaneGraph, LaneGraphFile, FOLLOWS};
use crate::metrics::{evaluate, MetricsReport, DEFAULT_THRESHOLD};
use crate::rgcn::{NodeFeatures, RelationalEdges, RgcnModel, DEFAULT_SCORE_THRESHOLD};
use crate::transport::{channel_schedule_at, encode_frame, ChannelConfig};

pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage}: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
}

fn config(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Config(msg.into())
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> ScenarioError {
    move |e| ScenarioError::Stage {
        stage,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Origin {
    pub latitude: f64,
    pub longitude: f64,
}

impl Origin {
    pub fn pose(&self) -> VehiclePose {
        VehiclePose {
            latitude: self.latitude,
            longitude: self.longitude,
            heading: 0.0,
        }
    }
}

/// Vehicle pose in the world plane; heading in radians clockwise from north.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanarPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

fn default_interval() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    pub vehicle_id: String,
    /// One frame per pose.
    pub trajectory: Vec<PlanarPose>,
    /// `null` sees the whole world.
    #[serde(default)]
    pub visibility_radius: Option<f64>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub start_time_ms: u64,
    #[serde(default = "default_interval")]
    pub frame_interval_ms: u64,
}

fn default_spacing() -> f64 {
    DEFAULT_SPACING
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub version: u32,
    pub seed: u64,
    pub origin: Origin,
    pub world: LaneGraphFile,
    pub vehicles: Vec<VehicleSpec>,
    #[serde(default)]
    pub merge: MergeConfig,
    /// Sampling step used when frames are serialized to GeoJSON.
    #[serde(default = "default_spacing")]
    pub spacing: f64,
}

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn world_graph(&self) -> Result<LaneGraph, ScenarioError> {
        let g = self
            .world
            .clone()
            .into_graph()
            .map_err(|e| config(format!("world: {e}")))?;
        g.validate()
            .into_result()
            .map_err(|e| config(format!("world: {e}")))?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.version != SPEC_VERSION {
            return Err(config(format!("unsupported version {}", self.version)));
        }
        self.origin
            .pose()
            .validate()
            .map_err(|e| config(format!("origin: {e}")))?;
        self.world_graph()?;
        self.merge
            .validate()
            .map_err(|e| config(format!("merge: {e}")))?;
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return Err(config("spacing must be positive"));
        }
        let mut ids = BTreeSet::new();
        for (i, v) in self.vehicles.iter().enumerate() {
            let at = format!("vehicles[{i}]");
            if !ids.insert(v.vehicle_id.as_str()) {
                return Err(config(format!(
                    "{at}: duplicate vehicle_id {:?}",
                    v.vehicle_id
                )));
            }
            if !(v.noise_sigma.is_finite() && v.noise_sigma >= 0.0) {
                return Err(config(format!("{at}: noise_sigma must be >= 0")));
            }
            if let Some(r) = v.visibility_radius {
                if !(r > 0.0) {
                    return Err(config(format!("{at}: visibility_radius must be positive")));
                }
            }
            if v.trajectory
                .iter()
                .any(|p| !(p.x.is_finite() && p.y.is_finite() && p.heading.is_finite()))
            {
                return Err(config(format!("{at}: non-finite trajectory pose")));
            }
            v.channel
                .validate()
                .map_err(|e| config(format!("{at}: {e}")))?;
        }
        Ok(())
    }
}

/// One perception frame produced by [`generate`].
#[derive(Debug, Clone)]
pub struct VehicleFrame {
    pub vehicle_index: usize,
    pub meta: FrameMeta,
    /// Detections in the vehicle frame.
    pub graph: LaneGraph,
    /// Noise-free view of the same lanes.
    pub truth: LaneGraph,
    /// World lane index of each vertex.
    pub world_lanes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub world: LaneGraph,
    pub origin: VehiclePose,
    /// Ordered by vehicle, then frame.
    pub frames: Vec<VehicleFrame>,
}

fn lane_visible(curve: &BezierCurve, center: Point2, radius: Option<f64>) -> bool {
    let Some(r) = radius else {
        return true;
    };
    match curve.sample(DEFAULT_SPACING) {
        Ok(line) => line.points().iter().all(|p| p.distance(center) <= r),
        Err(_) => false,
    }
}

/// Builds every vehicle frame. Deterministic given `spec`; all noise
/// comes from one stream seeded by `spec.seed`, drawn vehicle by vehicle,
/// frame by frame, lane by lane, x before y.
pub fn generate(spec: &ScenarioSpec) -> Result<Scenario, ScenarioError> {
    spec.validate()?;
    let world = spec.world_graph()?;
    let origin = spec.origin.pose();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut frames = Vec::new();
    for (vi, v) in spec.vehicles.iter().enumerate() {
        let noise = if v.noise_sigma > 0.0 {
            Some(Normal::new(0.0, v.noise_sigma).map_err(|e| config(e.to_string()))?)
        } else {
            None
        };
        for (fi, p) in v.trajectory.iter().enumerate() {
            let center = Point2::new(p.x, p.y);
            let (lat, lon) = origin.bev_to_world(center).map_err(stage("generate"))?;
            let pose = VehiclePose::new(lat, lon, p.heading).map_err(stage("generate"))?;
            let to_vehicle = |q: Point2| -> Result<Point2, ScenarioError> {
                let (la, lo) = origin.bev_to_world(q).map_err(stage("generate"))?;
                pose.world_to_bev(la, lo).map_err(stage("generate"))
            };
            let visible: Vec<usize> = (0..world.vertex_count())
                .filter(|&i| lane_visible(&world.vertices()[i], center, v.visibility_radius))
                .collect();
            let local: BTreeMap<usize, usize> =
                visible.iter().enumerate().map(|(k, &i)| (i, k)).collect();
            let mut exact = Vec::with_capacity(visible.len());
            let mut noisy = Vec::with_capacity(visible.len());
            for &i in &visible {
                let cps: Vec<Point2> = world.vertices()[i]
                    .control_points()
                    .iter()
                    .map(|&q| to_vehicle(q))
                    .collect::<Result<_, _>>()?;
                let perturbed: Vec<Point2> = match &noise {
                    Some(n) => cps
                        .iter()
                        .map(|q| {
                            let dx = n.sample(&mut rng);
                            let dy = n.sample(&mut rng);
                            Point2::new(q.x + dx, q.y + dy)
                        })
                        .collect(),
                    None => cps.clone(),
                };
                exact.push(BezierCurve::new(cps).map_err(stage("generate"))?);
                noisy.push(BezierCurve::new(perturbed).map_err(stage("generate"))?);
            }
            let edges: Vec<(usize, usize, usize)> = world
                .edges()
                .filter_map(|e| Some((*local.get(&e.from.0)?, e.rel.0, *local.get(&e.to.0)?)))
                .collect();
            let relations = world.relations().to_vec();
            let meta = FrameMeta {
                vehicle_id: v.vehicle_id.clone(),
                frame_id: fi as u64,
                timestamp: v.start_time_ms + fi as u64 * v.frame_interval_ms,
                pose,
            };
            frames.push(VehicleFrame {
                vehicle_index: vi,
                meta,
                graph: LaneGraph::from_raw_parts(noisy, relations.clone(), edges.clone()),
                truth: LaneGraph::from_raw_parts(exact, relations, edges),
                world_lanes: visible,
            });
        }
    }
    Ok(Scenario {
        world,
        origin,
        frames,
    })
}

/// Replaces the `follows` edges of `g` with links predicted by `model`,
/// passing messages along the graph's current edges.
pub fn predict_edges(model: &RgcnModel, g: &LaneGraph) -> Result<LaneGraph, ScenarioError> {
    let h0 = NodeFeatures::from_control_points(g);
    let edges = RelationalEdges::from_graph(g);
    let links = model
        .predict_links(&h0, &edges, FOLLOWS, DEFAULT_SCORE_THRESHOLD)
        .map_err(stage("link prediction"))?;
    let rel = g
        .relation_id(FOLLOWS)
        .ok_or_else(|| config("graph has no follows relation"))?;
    let kept = g
        .edges()
        .filter(|e| e.rel != rel)
        .map(|e| (e.from.0, e.rel.0, e.to.0));
    let predicted = links.ones().map(|(i, j)| (i, rel.0, j));
    Ok(LaneGraph::from_raw_parts(
        g.vertices().to_vec(),
        g.relations().to_vec(),
        kept.chain(predicted).collect::<Vec<_>>(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEntry {
    Drop {
        vehicle_id: String,
        frame_id: u64,
        sent_ms: u64,
        payload_bytes: usize,
    },
    Ingest {
        vehicle_id: String,
        frame_id: u64,
        sent_ms: u64,
        delivered_ms: u64,
        payload_bytes: usize,
        #[serde(flatten)]
        outcome: IngestOutcome,
        /// Frame detections scored against the frame's noise-free view.
        frame_metrics: [f64; 5],
        global_lanes: usize,
    },
}

impl LogEntry {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub state: GlobalMap,
    pub snapshot: GeoLaneMap,
    pub log: Vec<LogEntry>,
}

impl SimulationOutput {
    pub fn log_jsonl(&self) -> String {
        self.log.iter().map(|e| e.to_json() + "\n").collect()
    }
}

/// Runs generate, optional link prediction, GeoJSON encoding, framing,
/// the per-vehicle channel, decoding and aggregation.
///
/// Frames reach the aggregator in delivery-time order; ties go to the lower
/// vehicle index, then the lower frame id.
pub fn simulate(
    spec: &ScenarioSpec,
    model: Option<&RgcnModel>,
) -> Result<SimulationOutput, ScenarioError> {
    let scenario = generate(spec)?;
    let service = AggregatorService::new(spec.merge).map_err(stage("aggregate"))?;

    struct Prepared {
        bytes: Vec<u8>,
        metrics: [f64; 5],
    }
    let mut prepared = Vec::with_capacity(scenario.frames.len());
    for f in &scenario.frames {
        let graph = match model {
            Some(m) => predict_edges(m, &f.graph)?,
            None => f.graph.clone(),
        };
        let metrics = evaluate(&graph, &f.truth, DEFAULT_THRESHOLD, DEFAULT_SPACING)
            .map_err(stage("evaluate"))?
            .headline();
        let doc = graph_to_geojson(&graph, &f.meta, spec.spacing).map_err(stage("serialize"))?;
        let bytes = encode_frame(&doc).map_err(stage("encode"))?;
        prepared.push(Prepared { bytes, metrics });
    }

    // (time, vehicle, frame, frame index, delivered)
    let mut events: Vec<(u64, usize, u64, usize, Option<u64>)> = Vec::new();
    for (vi, v) in spec.vehicles.iter().enumerate() {
        let idx: Vec<usize> = (0..scenario.frames.len())
            .filter(|&k| scenario.frames[k].vehicle_index == vi)
            .collect();
        let sent: Vec<u64> = idx
            .iter()
            .map(|&k| scenario.frames[k].meta.timestamp)
            .collect();
        let schedule = channel_schedule_at(&v.channel, &sent).map_err(stage("channel"))?;
        for d in schedule.dropped {
            let k = idx[d];
            events.push((sent[d], vi, scenario.frames[k].meta.frame_id, k, None));
        }
        for d in schedule.deliveries {
            let k = idx[d.index];
            let f = &scenario.frames[k];
            events.push((
                d.deliver_time_ms,
                vi,
                f.meta.frame_id,
                k,
                Some(d.deliver_time_ms),
            ));
        }
    }
    events.sort_by_key(|&(t, vi, fid, _, delivered)| (t, vi, fid, delivered.is_some()));

    let mut log = Vec::with_capacity(events.len());
    for (_, _, _, k, delivered) in events {
        let f = &scenario.frames[k];
        let p = &prepared[k];
        match delivered {
            None => log.push(LogEntry::Drop {
                vehicle_id: f.meta.vehicle_id.clone(),
                frame_id: f.meta.frame_id,
                sent_ms: f.meta.timestamp,
                payload_bytes: p.bytes.len(),
            }),
            Some(t) => {
                let outcome = service.ingest_frame(&p.bytes).map_err(stage("ingest"))?;
                log.push(LogEntry::Ingest {
                    vehicle_id: f.meta.vehicle_id.clone(),
                    frame_id: f.meta.frame_id,
                    sent_ms: f.meta.timestamp,
                    delivered_ms: t,
                    payload_bytes: p.bytes.len(),
                    outcome,
                    frame_metrics: p.metrics,
                    global_lanes: service.state().lanes.len(),
                });
            }
        }
    }
    let state = GlobalMap::clone(&service.state());
    let snapshot = state.snapshot().map_err(stage("snapshot"))?;
    Ok(SimulationOutput {
        state,
        snapshot,
        log,
    })
}

/// Reads a snapshot back into the world plane and scores it against the
/// world graph.
pub fn evaluate_snapshot(
    snapshot: &GeoLaneMap,
    world: &LaneGraph,
    origin: &VehiclePose,
    threshold: f64,
    spacing: f64,
) -> Result<MetricsReport, ScenarioError> {
    let degree = world.degree().unwrap_or(DEFAULT_DEGREE);
    let est = geojson_to_graph_in_frame(snapshot, origin, degree).map_err(stage("import"))?;
    evaluate(&est, world, threshold, spacing).map_err(stage("evaluate"))
}

/// Parameters for [`curved_road`].
#[derive(Debug, Clone, PartialEq)]
pub struct RoadLayout {
    /// Radius of the road centerline arc; the road bends right.
    pub radius: f64,
    pub segment_length: f64,
    pub segments: usize,
    /// Signed lateral offsets of each lane; positive lanes run forward,
    /// negative lanes run back toward the start.
    pub lane_offsets: Vec<f64>,
}

impl Default for RoadLayout {
    fn default() -> Self {
        Self {
            radius: 200.0,
            segment_length: 30.0,
            segments: 6,
            lane_offsets: vec![-5.25, -1.75, 1.75, 5.25],
        }
    }
}

impl RoadLayout {
    pub fn length(&self) -> f64 {
        self.segment_length * self.segments as f64
    }

    /// Centerline pose at arclength `s`.
    pub fn pose_at(&self, s: f64) -> PlanarPose {
        let phi = s / self.radius;
        PlanarPose {
            x: self.radius * (1.0 - phi.cos()),
            y: self.radius * phi.sin(),
            heading: phi,
        }
    }
}

/// A multi-lane road bending along a circular arc, one cubic per lane per
/// segment, with `follows` edges chaining consecutive segments of a lane.
pub fn curved_road(layout: &RoadLayout) -> Result<LaneGraph, ScenarioError> {
    let r0 = layout.radius;
    let dphi = layout.segment_length / r0;
    let mut g = LaneGraph::new();
    let mut chains = Vec::new();
    for &o in &layout.lane_offsets {
        let r = r0 - o;
        let handle = 4.0 / 3.0 * (dphi / 4.0).tan() * r;
        let at = |phi: f64| {
            (
                Point2::new(r0 - r * phi.cos(), r * phi.sin()),
                Point2::new(phi.sin(), phi.cos()),
            )
        };
        let mut ids = Vec::new();
        for k in 0..layout.segments {
            let (p0, t0) = at(k as f64 * dphi);
            let (p3, t1) = at((k + 1) as f64 * dphi);
            let mut curve = BezierCurve::new(vec![p0, p0 + t0 * handle, p3 - t1 * handle, p3])
                .map_err(stage("world"))?;
            if o < 0.0 {
                curve = curve.reversed();
            }
            ids.push(g.add_centerline(curve).map_err(stage("world"))?);
        }
        if o < 0.0 {
            ids.reverse();
        }
        chains.push(ids);
    }
    for ids in chains {
        for w in ids.windows(2) {
            g.connect_follows(w[0], w[1]).map_err(stage("world"))?;
        }
    }
    Ok(g)
}

/// Vehicles driving the layout: vehicle `k` covers `[start_k, end_k]` of the
/// road centerline with one frame every `step` meters.
#[allow(clippy::too_many_arguments)]
pub fn road_scenario(
    layout: &RoadLayout,
    seed: u64,
    origin: Origin,
    stretches: &[(f64, f64)],
    step: f64,
    visibility_radius: Option<f64>,
    noise_sigma: f64,
    channel: ChannelConfig,
) -> Result<ScenarioSpec, ScenarioError> {
    let world = curved_road(layout)?;
    let vehicles = stretches
        .iter()
        .enumerate()
        .map(|(k, &(a, b))| {
            let n = ((b - a) / step).floor() as usize;
            VehicleSpec {
                vehicle_id: format!("veh-{k}"),
                trajectory: (0..=n)
                    .map(|i| layout.pose_at(a + i as f64 * step))
                    .collect(),
                visibility_radius,
                noise_sigma,
                channel: ChannelConfig {
                    seed: channel.seed.wrapping_add(k as u64),
                    ..channel.clone()
                },
                start_time_ms: 0,
                frame_interval_ms: default_interval(),
            }
        })
        .collect();
    let spec = ScenarioSpec {
        version: SPEC_VERSION,
        seed,
        origin,
        world: LaneGraphFile::from_graph(&world),
        vehicles,
        merge: MergeConfig::default(),
        spacing: DEFAULT_SPACING,
    };
    spec.validate()?;
    Ok(spec)
}
