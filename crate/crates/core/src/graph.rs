//! Directed lane-centerline graph `G = (V, E, R)`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BezierCurve;

/// Name of the default (and usually only) relation.
pub const FOLLOWS: &str = "follows";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("curve degree {got} does not match graph degree {expected}")]
    DegreeMismatch { expected: usize, got: usize },
    #[error("vertex {0} out of range ({1} vertices)")]
    VertexOutOfRange(usize, usize),
    #[error("relation {0} out of range ({1} relations)")]
    RelationOutOfRange(usize, usize),
    #[error("self-loop on vertex {0}")]
    SelfLoop(usize),
    #[error("unknown relation {0:?}")]
    UnknownRelation(String),
    #[error("duplicate relation {0:?}")]
    DuplicateRelation(String),
    #[error("malformed graph: {0}")]
    Invalid(Violation),
    #[error("graph file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VertexId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId(pub usize);

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// A directed, labeled edge. Ordered by `(from, rel, to)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub from: VertexId,
    pub rel: RelationId,
    pub to: VertexId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneGraph {
    vertices: Vec<BezierCurve>,
    relations: Vec<String>,
    edges: BTreeSet<Edge>,
}

impl Default for LaneGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl LaneGraph {
    /// Empty graph with the single relation `"follows"`.
    pub fn new() -> Self {
        Self::with_relations(vec![FOLLOWS.to_string()]).expect("single relation")
    }

    pub fn with_relations(relations: Vec<String>) -> Result<Self, GraphError> {
        let mut seen = BTreeSet::new();
        for r in &relations {
            if !seen.insert(r.as_str()) {
                return Err(GraphError::DuplicateRelation(r.clone()));
            }
        }
        Ok(Self {
            vertices: Vec::new(),
            relations,
            edges: BTreeSet::new(),
        })
    }

    /// Assembles a graph without checking invariants; pair with [`LaneGraph::validate`].
    pub fn from_raw_parts(
        vertices: Vec<BezierCurve>,
        relations: Vec<String>,
        edges: impl IntoIterator<Item = (usize, usize, usize)>,
    ) -> Self {
        Self {
            vertices,
            relations,
            edges: edges
                .into_iter()
                .map(|(f, r, t)| Edge {
                    from: VertexId(f),
                    rel: RelationId(r),
                    to: VertexId(t),
                })
                .collect(),
        }
    }

    pub fn degree(&self) -> Option<usize> {
        self.vertices.first().map(BezierCurve::degree)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertices(&self) -> &[BezierCurve] {
        &self.vertices
    }

    pub fn vertex(&self, id: VertexId) -> Option<&BezierCurve> {
        self.vertices.get(id.0)
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relations
            .iter()
            .position(|r| r == name)
            .map(RelationId)
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter()
    }

    pub fn contains_edge(&self, from: VertexId, rel: RelationId, to: VertexId) -> bool {
        self.edges.contains(&Edge { from, rel, to })
    }

    /// Appends a centerline and returns its dense id.
    pub fn add_centerline(&mut self, curve: BezierCurve) -> Result<VertexId, GraphError> {
        if let Some(expected) = self.degree() {
            if curve.degree() != expected {
                return Err(GraphError::DegreeMismatch {
                    expected,
                    got: curve.degree(),
                });
            }
        }
        self.vertices.push(curve);
        Ok(VertexId(self.vertices.len() - 1))
    }

    /// Adds the directed edge `from -> to` under `rel`. Repeating an edge is a no-op.
    pub fn connect(
        &mut self,
        from: VertexId,
        rel: RelationId,
        to: VertexId,
    ) -> Result<(), GraphError> {
        let m = self.vertices.len();
        for v in [from, to] {
            if v.0 >= m {
                return Err(GraphError::VertexOutOfRange(v.0, m));
            }
        }
        if rel.0 >= self.relations.len() {
            return Err(GraphError::RelationOutOfRange(rel.0, self.relations.len()));
        }
        if from == to {
            return Err(GraphError::SelfLoop(from.0));
        }
        self.edges.insert(Edge { from, rel, to });
        Ok(())
    }

    /// Connects under the `"follows"` relation, adding it to the table if absent.
    pub fn connect_follows(&mut self, from: VertexId, to: VertexId) -> Result<(), GraphError> {
        let rel = match self.relation_id(FOLLOWS) {
            Some(r) => r,
            None => {
                self.relations.push(FOLLOWS.to_string());
                RelationId(self.relations.len() - 1)
            }
        };
        self.connect(from, rel, to)
    }

    /// Relation-agnostic adjacency: `M[i][j] = 1` iff some edge `i -> j` exists.
    pub fn incidence(&self) -> IncidenceMatrix {
        let mut m = IncidenceMatrix::zeros(self.vertices.len());
        for e in &self.edges {
            if e.from != e.to && e.from.0 < m.size && e.to.0 < m.size {
                m.set(e.from.0, e.to.0, true);
            }
        }
        m
    }

    /// `(from, to)` pairs for one relation.
    pub fn relation_edges(&self, rel: RelationId) -> Vec<(usize, usize)> {
        self.edges
            .iter()
            .filter(|e| e.rel == rel)
            .map(|e| (e.from.0, e.to.0))
            .collect()
    }

    /// Lists every invariant violation. An empty report means the graph is well formed.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let m = self.vertices.len();
        let degree = self.degree();
        for (i, v) in self.vertices.iter().enumerate() {
            if !v.is_finite() {
                violations.push(Violation::NonFiniteControlPoint { vertex: i });
            }
            if let Some(d) = degree {
                if v.degree() != d {
                    violations.push(Violation::DegreeMismatch {
                        vertex: i,
                        expected: d,
                        got: v.degree(),
                    });
                }
            }
        }
        let mut seen = BTreeSet::new();
        for r in &self.relations {
            if !seen.insert(r.as_str()) {
                violations.push(Violation::DuplicateRelation(r.clone()));
            }
        }
        for e in &self.edges {
            if e.from.0 >= m || e.to.0 >= m {
                violations.push(Violation::EdgeOutOfRange {
                    from: e.from.0,
                    to: e.to.0,
                });
            }
            if e.rel.0 >= self.relations.len() {
                violations.push(Violation::RelationOutOfRange(e.rel.0));
            }
            if e.from == e.to {
                violations.push(Violation::SelfLoop(e.from.0));
            }
        }
        ValidationReport { violations }
    }

    /// Maps every curve through `f`, keeping topology.
    pub fn map_curves(
        &self,
        mut f: impl FnMut(&BezierCurve) -> BezierCurve,
    ) -> Result<LaneGraph, GraphError> {
        let mut out = LaneGraph::with_relations(self.relations.clone())?;
        for v in &self.vertices {
            out.add_centerline(f(v))?;
        }
        out.edges = self.edges.clone();
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    SelfLoop(usize),
    EdgeOutOfRange {
        from: usize,
        to: usize,
    },
    RelationOutOfRange(usize),
    NonFiniteControlPoint {
        vertex: usize,
    },
    DegreeMismatch {
        vertex: usize,
        expected: usize,
        got: usize,
    },
    DuplicateRelation(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SelfLoop(v) => write!(f, "self-loop on vertex {v}"),
            Violation::EdgeOutOfRange { from, to } => {
                write!(f, "edge {from} -> {to} references a missing vertex")
            }
            Violation::RelationOutOfRange(r) => write!(f, "relation id {r} out of range"),
            Violation::NonFiniteControlPoint { vertex } => {
                write!(f, "vertex {vertex} has a non-finite control point")
            }
            Violation::DegreeMismatch {
                vertex,
                expected,
                got,
            } => write!(f, "vertex {vertex} has degree {got}, expected {expected}"),
            Violation::DuplicateRelation(r) => write!(f, "relation {r:?} listed twice"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<(), GraphError> {
        match self.violations.into_iter().next() {
            None => Ok(()),
            Some(v) => Err(GraphError::Invalid(v)),
        }
    }
}

/// Square 0/1 connectivity matrix with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IncidenceMatrix {
    size: usize,
    cells: Vec<bool>,
}

impl IncidenceMatrix {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            cells: vec![false; size * size],
        }
    }

    /// Builds from row-major 0/1 rows; diagonal entries are dropped.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self, GraphError> {
        let size = rows.len();
        let mut m = Self::zeros(size);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != size {
                return Err(GraphError::Parse(format!(
                    "row {i} has {} entries, expected {size}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                match v {
                    0 => {}
                    1 if i != j => m.set(i, j, true),
                    1 => return Err(GraphError::SelfLoop(i)),
                    _ => return Err(GraphError::Parse(format!("entry ({i},{j}) is {v}"))),
                }
            }
        }
        Ok(m)
    }

    pub fn from_pairs(size: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut m = Self::zeros(size);
        for (i, j) in pairs {
            if i != j && i < size && j < size {
                m.set(i, j, true);
            }
        }
        m
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.size + j]
    }

    /// Sets an entry; diagonal writes are ignored.
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        if i != j {
            self.cells[i * self.size + j] = value;
        }
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        (0..self.size)
            .map(|i| (0..self.size).map(|j| self.get(i, j) as u8).collect())
            .collect()
    }

    /// All `(i, j)` with `M[i][j] = 1`, row-major.
    pub fn ones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.size)
            .flat_map(move |i| (0..self.size).map(move |j| (i, j)))
            .filter(move |&(i, j)| self.get(i, j))
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// On-disk lane graph: `{"version":1,"relations":[..],"lanes":[{"control_points":[[x,y],..]}],"edges":[[from,rel,to],..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneGraphFile {
    pub version: u32,
    #[serde(default = "default_relations")]
    pub relations: Vec<String>,
    pub lanes: Vec<LaneRecord>,
    #[serde(default)]
    pub edges: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneRecord {
    pub control_points: Vec<[f64; 2]>,
}

fn default_relations() -> Vec<String> {
    vec![FOLLOWS.to_string()]
}

impl LaneGraphFile {
    pub const VERSION: u32 = 1;

    pub fn from_graph(g: &LaneGraph) -> Self {
        Self {
            version: Self::VERSION,
            relations: g.relations.clone(),
            lanes: g
                .vertices
                .iter()
                .map(|c| LaneRecord {
                    control_points: c.control_points().iter().map(|p| [p.x, p.y]).collect(),
                })
                .collect(),
            edges: g
                .edges
                .iter()
                .map(|e| [e.from.0, e.rel.0, e.to.0])
                .collect(),
        }
    }

    pub fn into_graph(self) -> Result<LaneGraph, GraphError> {
        if self.version != Self::VERSION {
            return Err(GraphError::Parse(format!(
                "unsupported version {}",
                self.version
            )));
        }
        let mut g = LaneGraph::with_relations(self.relations)?;
        for (i, lane) in self.lanes.into_iter().enumerate() {
            let pts: Vec<(f64, f64)> = lane.control_points.iter().map(|p| (p[0], p[1])).collect();
            let curve = BezierCurve::from_xy(&pts)
                .map_err(|e| GraphError::Parse(format!("lane {i}: {e}")))?;
            g.add_centerline(curve)?;
        }
        for [f, r, t] in self.edges {
            g.connect(VertexId(f), RelationId(r), VertexId(t))?;
        }
        Ok(g)
    }
}

impl LaneGraph {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&LaneGraphFile::from_graph(self)).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let file: LaneGraphFile =
            serde_json::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))?;
        file.into_graph()
    }
}
