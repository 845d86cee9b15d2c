//! Inference-only relational graph convolution with a DistMult link decoder.
//!
//! Node features are row vectors, so a layer maps `h_i (1×d_in)` through
//! `d_in × d_out` weight matrices:
//!
//! `h'_i = σ( Σ_r Σ_{j ∈ N_i^r} h_j W_r / c_{i,r} + h_i W_0 )`
//!
//! where `N_i^r` holds the in-neighbors of `i` under relation `r`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, RowDVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{IncidenceMatrix, LaneGraph};

pub const MODEL_VERSION: u32 = 1;

/// Default probability above which a scored pair becomes an edge.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum RgcnError {
    #[error("model file: {0}")]
    Parse(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported model version {0}")]
    Version(u32),
    #[error("model needs at least one layer")]
    NoLayers,
    #[error("layer {layer}: {detail}")]
    LayerShape { layer: usize, detail: String },
    #[error("distmult: {0}")]
    DistMultShape(String),
    #[error("unknown activation {0:?}")]
    UnknownActivation(String),
    #[error("unknown normalization {0:?}")]
    UnknownNormalization(String),
    #[error("relation {0:?} has no weights")]
    UnknownRelation(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = RgcnError;
    fn from_str(s: &str) -> Result<Self, RgcnError> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            other => Err(RgcnError::UnknownActivation(other.to_string())),
        }
    }
}

/// Rule for the per-node, per-relation constant `c_{i,r}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// `c_{i,r} = |N_i^r|`, or 1 when the neighborhood is empty.
    InDegree,
    /// `c_{i,r} = 1`.
    None,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::InDegree => "in_degree",
            Normalization::None => "none",
        }
    }
}

impl std::str::FromStr for Normalization {
    type Err = RgcnError;
    fn from_str(s: &str) -> Result<Self, RgcnError> {
        match s {
            "in_degree" => Ok(Normalization::InDegree),
            "none" => Ok(Normalization::None),
            other => Err(RgcnError::UnknownNormalization(other.to_string())),
        }
    }
}

/// `m × d` node feature matrix, one row per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures(pub DMatrix<f64>);

impl NodeFeatures {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, RgcnError> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(RgcnError::Dimension("ragged feature rows".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(RgcnError::NonFinite("node features"));
        }
        Ok(Self(DMatrix::from_row_iterator(
            rows.len(),
            d,
            rows.iter().flatten().copied(),
        )))
    }

    pub fn nodes(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).iter().copied().collect()
    }

    /// Flattened control points `(x0, y0, x1, y1, ..)` per lane, divided by
    /// the largest absolute coordinate in the frame.
    pub fn from_control_points(g: &LaneGraph) -> Self {
        let scale = g
            .vertices()
            .iter()
            .flat_map(|c| c.control_points())
            .map(|p| p.x.abs().max(p.y.abs()))
            .fold(0.0, f64::max);
        let scale = if scale > 0.0 { scale } else { 1.0 };
        let width = g.degree().map_or(0, |d| 2 * (d + 1));
        let data = g.vertices().iter().flat_map(|c| {
            c.control_points()
                .iter()
                .flat_map(|p| [p.x / scale, p.y / scale])
        });
        Self(DMatrix::from_row_iterator(g.vertex_count(), width, data))
    }
}

/// Directed `(from, to)` edge lists keyed by relation name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelationalEdges {
    by_relation: BTreeMap<String, Vec<(usize, usize)>>,
}

impl RelationalEdges {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, relation: &str, from: usize, to: usize) {
        let list = self.by_relation.entry(relation.to_string()).or_default();
        if !list.contains(&(from, to)) {
            list.push((from, to));
        }
    }

    pub fn from_graph(g: &LaneGraph) -> Self {
        let mut out = Self::new();
        for e in g.edges() {
            out.insert(&g.relations()[e.rel.0], e.from.0, e.to.0);
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[(usize, usize)])> {
        self.by_relation
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn relation(&self, name: &str) -> &[(usize, usize)] {
        self.by_relation.get(name).map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgcnLayer {
    /// `W_0`, `d_in × d_out`.
    pub w_self: DMatrix<f64>,
    /// `W_r`, each `d_in × d_out`.
    pub w_rel: BTreeMap<String, DMatrix<f64>>,
    pub normalization: Normalization,
}

impl RgcnLayer {
    pub fn input_dim(&self) -> usize {
        self.w_self.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w_self.ncols()
    }

    fn check_shapes(&self) -> Result<(), String> {
        for (name, w) in &self.w_rel {
            if w.shape() != self.w_self.shape() {
                return Err(format!(
                    "w_rel[{name:?}] is {}x{} but w_self is {}x{}",
                    w.nrows(),
                    w.ncols(),
                    self.w_self.nrows(),
                    self.w_self.ncols()
                ));
            }
        }
        Ok(())
    }
}

/// One relational convolution step.
pub fn layer_forward(
    layer: &RgcnLayer,
    h: &NodeFeatures,
    edges: &RelationalEdges,
    activation: Activation,
) -> Result<NodeFeatures, RgcnError> {
    let m = h.nodes();
    if h.width() != layer.input_dim() {
        return Err(RgcnError::Dimension(format!(
            "features have width {} but the layer expects {}",
            h.width(),
            layer.input_dim()
        )));
    }
    let mut pre = &h.0 * &layer.w_self;
    for (name, list) in edges.iter() {
        if list.is_empty() {
            continue;
        }
        let w = layer
            .w_rel
            .get(name)
            .ok_or_else(|| RgcnError::UnknownRelation(name.to_string()))?;
        let mut in_neighbors: Vec<Vec<usize>> = vec![Vec::new(); m];
        for &(from, to) in list {
            if from >= m || to >= m {
                return Err(RgcnError::Dimension(format!(
                    "edge {from} -> {to} outside {m} nodes"
                )));
            }
            in_neighbors[to].push(from);
        }
        let messages = &h.0 * w;
        for (i, nbrs) in in_neighbors.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            let c = match layer.normalization {
                Normalization::InDegree => nbrs.len() as f64,
                Normalization::None => 1.0,
            };
            // Summing in value order keeps the result independent of vertex
            // numbering, bit for bit.
            let mut rows: Vec<RowDVector<f64>> =
                nbrs.iter().map(|&j| messages.row(j).into_owned()).collect();
            rows.sort_by(|a, b| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let mut acc = RowDVector::zeros(layer.output_dim());
            for r in &rows {
                acc += r;
            }
            let mut row = pre.row_mut(i);
            row += acc / c;
        }
    }
    pre.apply(|x| *x = activation.apply(*x));
    Ok(NodeFeatures(pre))
}

pub fn distmult_score(e_i: &[f64], r_diag: &[f64], e_j: &[f64]) -> Result<f64, RgcnError> {
    if e_i.len() != r_diag.len() || e_j.len() != r_diag.len() {
        return Err(RgcnError::Dimension(format!(
            "distmult lengths {}, {}, {}",
            e_i.len(),
            r_diag.len(),
            e_j.len()
        )));
    }
    // (a * b) * r keeps the score bitwise symmetric in its two embeddings.
    Ok(e_i
        .iter()
        .zip(e_j)
        .zip(r_diag)
        .map(|((a, b), r)| (a * b) * r)
        .sum())
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgcnModel {
    layers: Vec<RgcnLayer>,
    activation: Activation,
    distmult: BTreeMap<String, Vec<f64>>,
}

impl RgcnModel {
    pub fn new(
        layers: Vec<RgcnLayer>,
        activation: Activation,
        distmult: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self, RgcnError> {
        if layers.is_empty() {
            return Err(RgcnError::NoLayers);
        }
        for (idx, layer) in layers.iter().enumerate() {
            layer
                .check_shapes()
                .map_err(|detail| RgcnError::LayerShape { layer: idx, detail })?;
            let finite = layer.w_self.iter().all(|v| v.is_finite())
                && layer
                    .w_rel
                    .values()
                    .flat_map(|w| w.iter())
                    .all(|v| v.is_finite());
            if !finite {
                return Err(RgcnError::LayerShape {
                    layer: idx,
                    detail: "non-finite weight".into(),
                });
            }
            if idx > 0 && layers[idx - 1].output_dim() != layer.input_dim() {
                return Err(RgcnError::LayerShape {
                    layer: idx,
                    detail: format!(
                        "input dim {} does not match previous output dim {}",
                        layer.input_dim(),
                        layers[idx - 1].output_dim()
                    ),
                });
            }
        }
        let d = layers.last().unwrap().output_dim();
        for (name, diag) in &distmult {
            if diag.len() != d {
                return Err(RgcnError::DistMultShape(format!(
                    "relation {name:?} has length {} but embeddings have {d}",
                    diag.len()
                )));
            }
            if diag.iter().any(|v| !v.is_finite()) {
                return Err(RgcnError::NonFinite("distmult"));
            }
        }
        Ok(Self {
            layers,
            activation,
            distmult,
        })
    }

    pub fn layers(&self) -> &[RgcnLayer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn distmult(&self, relation: &str) -> Option<&[f64]> {
        self.distmult.get(relation).map(Vec::as_slice)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    /// Feeds `h0` through every layer in order.
    pub fn forward(
        &self,
        h0: &NodeFeatures,
        edges: &RelationalEdges,
    ) -> Result<NodeFeatures, RgcnError> {
        self.layers.iter().try_fold(h0.clone(), |h, layer| {
            layer_forward(layer, &h, edges, self.activation)
        })
    }

    /// Scores every ordered pair under `relation` and keeps those whose
    /// logistic probability exceeds `score_threshold`. The diagonal stays zero.
    pub fn predict_links(
        &self,
        h0: &NodeFeatures,
        edges: &RelationalEdges,
        relation: &str,
        score_threshold: f64,
    ) -> Result<IncidenceMatrix, RgcnError> {
        let r = self
            .distmult(relation)
            .ok_or_else(|| RgcnError::UnknownRelation(relation.to_string()))?;
        let emb = self.forward(h0, edges)?;
        let m = emb.nodes();
        let mut out = IncidenceMatrix::zeros(m);
        if score_threshold >= 1.0 {
            return Ok(out);
        }
        // Compare in logit space so saturated scores are still ordered.
        let cut = if score_threshold <= 0.0 {
            f64::NEG_INFINITY
        } else {
            (score_threshold / (1.0 - score_threshold)).ln()
        };
        let rows: Vec<Vec<f64>> = (0..m).map(|i| emb.row(i)).collect();
        for i in 0..m {
            for j in 0..m {
                if i != j && distmult_score(&rows[i], r, &rows[j])? > cut {
                    out.set(i, j, true);
                }
            }
        }
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<Self, RgcnError> {
        let raw: ModelFile =
            serde_json::from_str(text).map_err(|e| RgcnError::Parse(e.to_string()))?;
        raw.into_model()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RgcnError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelFile::from_model(self)).expect("serializable")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RgcnError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<RgcnModel, RgcnError> {
    RgcnModel::load(path)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    activation: String,
    layers: Vec<LayerFile>,
    distmult: BTreeMap<String, Vec<f64>>,
    #[serde(default = "default_normalization")]
    normalization: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    w_self: Vec<Vec<f64>>,
    #[serde(default)]
    w_rel: BTreeMap<String, Vec<Vec<f64>>>,
}

fn default_normalization() -> String {
    Normalization::InDegree.name().to_string()
}

fn matrix_from_rows(
    rows: &[Vec<f64>],
    layer: usize,
    what: &str,
) -> Result<DMatrix<f64>, RgcnError> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(RgcnError::LayerShape {
            layer,
            detail: format!("{what} is empty"),
        });
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
        return Err(RgcnError::LayerShape {
            layer,
            detail: format!(
                "{what} row {bad} has {} entries, expected {cols}",
                rows[bad].len()
            ),
        });
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        cols,
        rows.iter().flatten().copied(),
    ))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl ModelFile {
    fn into_model(self) -> Result<RgcnModel, RgcnError> {
        if self.version != MODEL_VERSION {
            return Err(RgcnError::Version(self.version));
        }
        let activation: Activation = self.activation.parse()?;
        let normalization: Normalization = self.normalization.parse()?;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(idx, l)| {
                let w_self = matrix_from_rows(&l.w_self, idx, "w_self")?;
                let w_rel = l
                    .w_rel
                    .iter()
                    .map(|(k, v)| {
                        Ok((
                            k.clone(),
                            matrix_from_rows(v, idx, &format!("w_rel[{k:?}]"))?,
                        ))
                    })
                    .collect::<Result<_, RgcnError>>()?;
                Ok(RgcnLayer {
                    w_self,
                    w_rel,
                    normalization,
                })
            })
            .collect::<Result<Vec<_>, RgcnError>>()?;
        RgcnModel::new(layers, activation, self.distmult)
    }

    fn from_model(m: &RgcnModel) -> Self {
        Self {
            version: MODEL_VERSION,
            activation: m.activation.name().to_string(),
            layers: m
                .layers
                .iter()
                .map(|l| LayerFile {
                    w_self: matrix_rows(&l.w_self),
                    w_rel: l
                        .w_rel
                        .iter()
                        .map(|(k, v)| (k.clone(), matrix_rows(v)))
                        .collect(),
                })
                .collect(),
            distmult: m.distmult.clone(),
            normalization: m
                .layers
                .first()
                .map_or(Normalization::InDegree, |l| l.normalization)
                .name()
                .to_string(),
        }
    }
}
