//! Geo-referenced GeoJSON lane maps.
//!
//! A [`GeoLaneMap`] is an RFC 7946 `FeatureCollection` with one `LineString`
//! feature per centerline. Connectivity travels in the foreign member
//! `"lane_edges"` as `[from_lane_id, to_lane_id]` pairs, and the producing
//! frame's metadata in the foreign member `"frame"`.
//!
//! Output is deterministic: keys are emitted in a fixed order and
//! coordinates are rounded to 7 decimal places of a degree.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::geometry::{GeometryError, Point2, Polyline, VehiclePose};
use crate::graph::{GraphError, LaneGraph, VertexId};

pub const DEFAULT_LANE_TYPE: &str = "driving";

const COORD_SCALE: f64 = 1e7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoJsonError {
    #[error("invalid JSON: {0}")]
    Syntax(String),
    #[error("schema violation at {pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("lane_edges{pointer} references missing lane {lane_id}")]
    DanglingEdge { pointer: String, lane_id: u64 },
    #[error("document has no frame metadata")]
    MissingFrame,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn schema(pointer: impl Into<String>, message: impl Into<String>) -> GeoJsonError {
    GeoJsonError::Schema {
        pointer: pointer.into(),
        message: message.into(),
    }
}

/// Identity and localization of one perception frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameMeta {
    pub vehicle_id: String,
    pub frame_id: u64,
    pub timestamp: u64,
    pub pose: VehiclePose,
}

/// One centerline feature.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneFeature {
    pub lane_id: u64,
    pub lane_type: String,
    pub curvature: f64,
    pub frame_id: u64,
    pub vehicle_id: String,
    /// Number of merged observations; only set on aggregated maps.
    pub support_count: Option<u64>,
    /// `[longitude, latitude]` positions.
    pub coordinates: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GeoLaneMap {
    pub frame: Option<FrameMeta>,
    pub features: Vec<LaneFeature>,
    pub lane_edges: Vec<[u64; 2]>,
}

/// Rounds to the fixed output precision, folding `-0` into `0`.
pub fn round_degrees(v: f64) -> f64 {
    let r = (v * COORD_SCALE).round() / COORD_SCALE;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Serialize)]
struct FeatureCollectionOut<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    frame: Option<&'a FrameMeta>,
    features: Vec<FeatureOut<'a>>,
    lane_edges: &'a [[u64; 2]],
}

#[derive(Serialize)]
struct FeatureOut<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    geometry: GeometryOut<'a>,
    properties: PropertiesOut<'a>,
}

#[derive(Serialize)]
struct GeometryOut<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    coordinates: &'a [[f64; 2]],
}

#[derive(Serialize)]
struct PropertiesOut<'a> {
    lane_id: u64,
    lane_type: &'a str,
    curvature: f64,
    frame_id: u64,
    vehicle_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    support_count: Option<u64>,
}

impl GeoLaneMap {
    /// Compact, deterministic GeoJSON text.
    pub fn to_json(&self) -> String {
        let out = FeatureCollectionOut {
            kind: "FeatureCollection",
            frame: self.frame.as_ref(),
            features: self
                .features
                .iter()
                .map(|f| FeatureOut {
                    kind: "Feature",
                    geometry: GeometryOut {
                        kind: "LineString",
                        coordinates: &f.coordinates,
                    },
                    properties: PropertiesOut {
                        lane_id: f.lane_id,
                        lane_type: &f.lane_type,
                        curvature: f.curvature,
                        frame_id: f.frame_id,
                        vehicle_id: &f.vehicle_id,
                        support_count: f.support_count,
                    },
                })
                .collect(),
            lane_edges: &self.lane_edges,
        };
        serde_json::to_string(&out).expect("serializable")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_json().into_bytes()
    }

    pub fn from_json(text: &str) -> Result<Self, GeoJsonError> {
        Self::parse(text).map(|(m, _)| m)
    }

    /// Parses and validates a document, returning non-fatal warnings alongside.
    pub fn parse(text: &str) -> Result<(Self, Vec<String>), GeoJsonError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| GeoJsonError::Syntax(e.to_string()))?;
        Self::from_value(&value)
    }

    pub fn from_value(value: &Value) -> Result<(Self, Vec<String>), GeoJsonError> {
        let mut warnings = Vec::new();
        let root = value
            .as_object()
            .ok_or_else(|| schema("", "document must be an object"))?;
        match root.get("type") {
            Some(Value::String(t)) if t == "FeatureCollection" => {}
            _ => return Err(schema("/type", "expected \"FeatureCollection\"")),
        }
        let frame = match root.get("frame") {
            None => None,
            Some(v) => {
                let meta: FrameMeta = serde_json::from_value(v.clone())
                    .map_err(|e| schema("/frame", e.to_string()))?;
                meta.pose
                    .validate()
                    .map_err(|e| schema("/frame/pose", e.to_string()))?;
                Some(meta)
            }
        };
        let features_json = root
            .get("features")
            .and_then(Value::as_array)
            .ok_or_else(|| schema("/features", "expected an array"))?;
        let mut features = Vec::with_capacity(features_json.len());
        let mut ids = BTreeSet::new();
        for (i, f) in features_json.iter().enumerate() {
            let feature = parse_feature(f, &format!("/features/{i}"))?;
            if !ids.insert(feature.lane_id) {
                return Err(schema(
                    format!("/features/{i}/properties/lane_id"),
                    format!("duplicate lane_id {}", feature.lane_id),
                ));
            }
            features.push(feature);
        }
        let lane_edges = match root.get("lane_edges") {
            None => {
                warnings.push("document has no \"lane_edges\" member; assuming no edges".into());
                Vec::new()
            }
            Some(v) => parse_edges(v)?,
        };
        for (k, [a, b]) in lane_edges.iter().enumerate() {
            for (slot, id) in [(0, a), (1, b)] {
                if !ids.contains(id) {
                    return Err(GeoJsonError::DanglingEdge {
                        pointer: format!("/{k}/{slot}"),
                        lane_id: *id,
                    });
                }
            }
            if a == b {
                return Err(schema(format!("/lane_edges/{k}"), "self-loop edge"));
            }
        }
        Ok((
            Self {
                frame,
                features,
                lane_edges,
            },
            warnings,
        ))
    }
}

fn get_u64(props: &Map<String, Value>, key: &str, at: &str) -> Result<u64, GeoJsonError> {
    props
        .get(key)
        .and_then(Value::as_u64)
        .ok_or_else(|| schema(format!("{at}/{key}"), "expected a nonnegative integer"))
}

fn get_str<'a>(
    props: &'a Map<String, Value>,
    key: &str,
    at: &str,
) -> Result<&'a str, GeoJsonError> {
    props
        .get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| schema(format!("{at}/{key}"), "expected a string"))
}

fn parse_feature(v: &Value, at: &str) -> Result<LaneFeature, GeoJsonError> {
    let obj = v
        .as_object()
        .ok_or_else(|| schema(at, "feature must be an object"))?;
    match obj.get("type") {
        Some(Value::String(t)) if t == "Feature" => {}
        _ => return Err(schema(format!("{at}/type"), "expected \"Feature\"")),
    }
    let geom_at = format!("{at}/geometry");
    let geom = obj
        .get("geometry")
        .and_then(Value::as_object)
        .ok_or_else(|| schema(&geom_at, "expected a geometry object"))?;
    match geom.get("type") {
        Some(Value::String(t)) if t == "LineString" => {}
        _ => return Err(schema(format!("{geom_at}/type"), "expected \"LineString\"")),
    }
    let coords_at = format!("{geom_at}/coordinates");
    let coords = geom
        .get("coordinates")
        .and_then(Value::as_array)
        .ok_or_else(|| schema(&coords_at, "expected an array of positions"))?;
    if coords.len() < 2 {
        return Err(schema(
            &coords_at,
            "a LineString needs at least two positions",
        ));
    }
    let mut coordinates = Vec::with_capacity(coords.len());
    for (k, pos) in coords.iter().enumerate() {
        let pos_at = format!("{coords_at}/{k}");
        let arr = pos
            .as_array()
            .filter(|a| (2..=3).contains(&a.len()))
            .ok_or_else(|| schema(&pos_at, "a position has two or three numbers"))?;
        let nums: Option<Vec<f64>> = arr.iter().map(Value::as_f64).collect();
        let nums = nums.ok_or_else(|| schema(&pos_at, "position entries must be numbers"))?;
        let (lon, lat) = (nums[0], nums[1]);
        if !(lon.abs() <= 180.0) {
            return Err(schema(
                format!("{pos_at}/0"),
                format!("longitude {lon} out of range"),
            ));
        }
        if !(lat.abs() <= 90.0) {
            return Err(schema(
                format!("{pos_at}/1"),
                format!("latitude {lat} out of range"),
            ));
        }
        coordinates.push([lon, lat]);
    }
    let props_at = format!("{at}/properties");
    let props = obj
        .get("properties")
        .and_then(Value::as_object)
        .ok_or_else(|| schema(&props_at, "expected a properties object"))?;
    let curvature = props
        .get("curvature")
        .and_then(Value::as_f64)
        .ok_or_else(|| schema(format!("{props_at}/curvature"), "expected a number"))?;
    let support_count = match props.get("support_count") {
        None => None,
        Some(_) => Some(get_u64(props, "support_count", &props_at)?),
    };
    Ok(LaneFeature {
        lane_id: get_u64(props, "lane_id", &props_at)?,
        lane_type: get_str(props, "lane_type", &props_at)?.to_string(),
        curvature,
        frame_id: get_u64(props, "frame_id", &props_at)?,
        vehicle_id: get_str(props, "vehicle_id", &props_at)?.to_string(),
        support_count,
        coordinates,
    })
}

fn parse_edges(v: &Value) -> Result<Vec<[u64; 2]>, GeoJsonError> {
    let arr = v
        .as_array()
        .ok_or_else(|| schema("/lane_edges", "expected an array"))?;
    arr.iter()
        .enumerate()
        .map(|(k, e)| {
            let pair = e
                .as_array()
                .filter(|p| p.len() == 2)
                .ok_or_else(|| schema(format!("/lane_edges/{k}"), "expected [from, to]"))?;
            let a = pair[0]
                .as_u64()
                .ok_or_else(|| schema(format!("/lane_edges/{k}/0"), "expected a lane id"))?;
            let b = pair[1]
                .as_u64()
                .ok_or_else(|| schema(format!("/lane_edges/{k}/1"), "expected a lane id"))?;
            Ok([a, b])
        })
        .collect()
}

/// Samples every centerline at `spacing`, projects it with the frame pose,
/// and emits one feature per vertex. Lane ids are vertex indices.
pub fn graph_to_geojson(
    g: &LaneGraph,
    meta: &FrameMeta,
    spacing: f64,
) -> Result<GeoLaneMap, GeoJsonError> {
    meta.pose.validate()?;
    let mut features = Vec::with_capacity(g.vertex_count());
    for (i, curve) in g.vertices().iter().enumerate() {
        let samples = curve.sample(spacing)?;
        let coordinates = project_points(&meta.pose, samples.points())?;
        let curvature = match curve.curvature_at(0.5) {
            Ok(k) => k,
            Err(GeometryError::Cusp(_)) => 0.0,
            Err(e) => return Err(e.into()),
        };
        features.push(LaneFeature {
            lane_id: i as u64,
            lane_type: DEFAULT_LANE_TYPE.to_string(),
            curvature,
            frame_id: meta.frame_id,
            vehicle_id: meta.vehicle_id.clone(),
            support_count: None,
            coordinates,
        });
    }
    let lane_edges = g
        .incidence()
        .ones()
        .map(|(a, b)| [a as u64, b as u64])
        .collect();
    Ok(GeoLaneMap {
        frame: Some(meta.clone()),
        features,
        lane_edges,
    })
}

/// Projects local points to rounded `[lon, lat]` positions.
pub fn project_points(
    pose: &VehiclePose,
    points: &[Point2],
) -> Result<Vec<[f64; 2]>, GeoJsonError> {
    points
        .iter()
        .map(|&p| {
            let (lat, lon) = pose.bev_to_world(p)?;
            Ok([round_degrees(lon), round_degrees(lat)])
        })
        .collect()
}

/// Inverse-projects `[lon, lat]` positions into the frame of `pose`.
pub fn unproject_positions(
    pose: &VehiclePose,
    coords: &[[f64; 2]],
) -> Result<Polyline, GeoJsonError> {
    let pts = coords
        .iter()
        .map(|&[lon, lat]| pose.world_to_bev(lat, lon))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Polyline::from_points_dedup(pts)?)
}

/// Result of reading a map back into a graph.
#[derive(Debug, Clone)]
pub struct ImportedGraph {
    pub graph: LaneGraph,
    pub meta: FrameMeta,
    /// Lane id of each vertex, in vertex order.
    pub lane_ids: Vec<u64>,
}

/// Rebuilds a lane graph in the frame recorded in the document.
pub fn geojson_to_graph(doc: &GeoLaneMap, degree: usize) -> Result<ImportedGraph, GeoJsonError> {
    let meta = doc.frame.clone().ok_or(GeoJsonError::MissingFrame)?;
    let graph = geojson_to_graph_in_frame(doc, &meta.pose, degree)?;
    Ok(ImportedGraph {
        graph,
        meta,
        lane_ids: doc.features.iter().map(|f| f.lane_id).collect(),
    })
}

/// Rebuilds a lane graph in the local frame of an arbitrary `pose`.
pub fn geojson_to_graph_in_frame(
    doc: &GeoLaneMap,
    pose: &VehiclePose,
    degree: usize,
) -> Result<LaneGraph, GeoJsonError> {
    let mut g = LaneGraph::new();
    let mut index = BTreeMap::new();
    for f in &doc.features {
        let line = unproject_positions(pose, &f.coordinates)?;
        let line = if line.len() < degree + 1 {
            Polyline::from_points_dedup(line.resample_count(degree + 1))?
        } else {
            line
        };
        let curve = line.fit_bezier(degree)?;
        let id = g.add_centerline(curve)?;
        index.insert(f.lane_id, id);
    }
    for (k, [a, b]) in doc.lane_edges.iter().enumerate() {
        let lookup = |id: &u64, slot: usize| -> Result<VertexId, GeoJsonError> {
            index.get(id).copied().ok_or(GeoJsonError::DanglingEdge {
                pointer: format!("/{k}/{slot}"),
                lane_id: *id,
            })
        };
        g.connect_follows(lookup(a, 0)?, lookup(b, 1)?)?;
    }
    Ok(g)
}
