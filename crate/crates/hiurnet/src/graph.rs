//! Hierarchical urban data model: mesh grids and cities, their indicator
//! features, inclusion structure, and typed flow records, assembled into a
//! heterogeneous directed graph.
//!
//! Message-passing graphs for training must be rebuilt from the training split
//! only; `includes`/`in` (and optional `geo`) edges are structural and always
//! present. Edge volumes are regression targets, never encoder inputs.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Mesh,
    City,
}

impl UnitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitKind::Mesh => "mesh",
            UnitKind::City => "city",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mesh" => Some(UnitKind::Mesh),
            "city" => Some(UnitKind::City),
            _ => None,
        }
    }
}

/// A mesh grid or city, identified by a dense per-kind index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitId {
    pub kind: UnitKind,
    pub index: usize,
}

impl UnitId {
    pub fn mesh(index: usize) -> Self {
        Self {
            kind: UnitKind::Mesh,
            index,
        }
    }

    pub fn city(index: usize) -> Self {
        Self {
            kind: UnitKind::City,
            index,
        }
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.index)
    }
}

/// Flow task, in the canonical order used for task weights and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FlowKind {
    C2M,
    M2C,
    M2M,
}

impl FlowKind {
    pub const ALL: [FlowKind; 3] = [FlowKind::C2M, FlowKind::M2C, FlowKind::M2M];

    pub fn as_str(self) -> &'static str {
        match self {
            FlowKind::C2M => "C2M",
            FlowKind::M2C => "M2C",
            FlowKind::M2M => "M2M",
        }
    }

    pub fn edge_type(self) -> EdgeType {
        match self {
            FlowKind::C2M => EdgeType::C2M,
            FlowKind::M2C => EdgeType::M2C,
            FlowKind::M2M => EdgeType::M2M,
        }
    }

    pub fn endpoint_kinds(self) -> (UnitKind, UnitKind) {
        match self {
            FlowKind::C2M => (UnitKind::City, UnitKind::Mesh),
            FlowKind::M2C => (UnitKind::Mesh, UnitKind::City),
            FlowKind::M2M => (UnitKind::Mesh, UnitKind::Mesh),
        }
    }

    fn from_endpoints(origin: UnitKind, destination: UnitKind) -> Option<Self> {
        match (origin, destination) {
            (UnitKind::City, UnitKind::Mesh) => Some(FlowKind::C2M),
            (UnitKind::Mesh, UnitKind::City) => Some(FlowKind::M2C),
            (UnitKind::Mesh, UnitKind::Mesh) => Some(FlowKind::M2M),
            (UnitKind::City, UnitKind::City) => None,
        }
    }
}

/// One per-task value for each of the three flow tasks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerTask<T> {
    pub c2m: T,
    pub m2c: T,
    pub m2m: T,
}

impl<T> PerTask<T> {
    pub fn get(&self, kind: FlowKind) -> &T {
        match kind {
            FlowKind::C2M => &self.c2m,
            FlowKind::M2C => &self.m2c,
            FlowKind::M2M => &self.m2m,
        }
    }

    pub fn get_mut(&mut self, kind: FlowKind) -> &mut T {
        match kind {
            FlowKind::C2M => &mut self.c2m,
            FlowKind::M2C => &mut self.m2c,
            FlowKind::M2M => &mut self.m2m,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (FlowKind, &T)> {
        FlowKind::ALL.iter().map(move |&k| (k, self.get(k)))
    }

    pub fn map<U>(&self, mut f: impl FnMut(FlowKind, &T) -> U) -> PerTask<U> {
        PerTask {
            c2m: f(FlowKind::C2M, &self.c2m),
            m2c: f(FlowKind::M2C, &self.m2c),
            m2m: f(FlowKind::M2M, &self.m2m),
        }
    }
}

/// A `(origin, destination, volume)` cell of one of the typed OD matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub origin: UnitId,
    pub destination: UnitId,
    pub volume: f64,
}

impl FlowRecord {
    pub fn new(origin: UnitId, destination: UnitId, volume: f64) -> Result<Self> {
        if FlowKind::from_endpoints(origin.kind, destination.kind).is_none() {
            return Err(Error::InvalidConfig(format!(
                "unsupported flow endpoints {origin} -> {destination}"
            )));
        }
        if volume < 0.0 || !volume.is_finite() {
            return Err(Error::NegativeVolume {
                origin,
                destination,
                volume,
            });
        }
        Ok(Self {
            origin,
            destination,
            volume,
        })
    }

    pub fn kind(&self) -> FlowKind {
        FlowKind::from_endpoints(self.origin.kind, self.destination.kind)
            .expect("validated on construction")
    }

    /// Identity key ignoring the volume.
    pub fn key(&self) -> (UnitId, UnitId) {
        (self.origin, self.destination)
    }
}

/// Per-grid socioeconomic indicators, optionally standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorTable {
    pub feature_names: Vec<String>,
    /// One row per grid, `grid_count x feature_count`.
    pub values: Tensor,
    /// Per-column mean/stdev captured when `standardize` ran.
    pub stats: Option<Standardization>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub stdevs: Vec<f64>,
}

impl IndicatorTable {
    pub fn new(feature_names: Vec<String>, values: Tensor) -> Self {
        assert_eq!(feature_names.len(), values.cols(), "feature name count");
        Self {
            feature_names,
            values,
            stats: None,
        }
    }

    pub fn grid_count(&self) -> usize {
        self.values.rows()
    }

    pub fn feature_count(&self) -> usize {
        self.feature_names.len()
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .feature_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::MissingIndicatorColumn(name.to_string()))?;
        Ok((0..self.grid_count())
            .map(|i| self.values.row(i)[j])
            .collect())
    }

    /// Per-column z-score with population stdev; constant columns map to 0 and
    /// record a stdev of 0. Means and stdevs describe the pre-transform values.
    pub fn standardize(&self) -> IndicatorTable {
        let (n, c) = (self.grid_count(), self.feature_count());
        let mut means = vec![0.0; c];
        let mut stdevs = vec![0.0; c];
        for j in 0..c {
            let mut sum = 0.0;
            for i in 0..n {
                sum += self.values.row(i)[j];
            }
            means[j] = sum / n as f64;
            let mut ss = 0.0;
            for i in 0..n {
                let d = self.values.row(i)[j] - means[j];
                ss += d * d;
            }
            stdevs[j] = (ss / n as f64).sqrt();
        }
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                let v = self.values.row(i)[j];
                data.push(if stdevs[j] > 0.0 {
                    (v - means[j]) / stdevs[j]
                } else {
                    0.0
                });
            }
        }
        IndicatorTable {
            feature_names: self.feature_names.clone(),
            values: Tensor::matrix(n, c, data),
            stats: Some(Standardization { means, stdevs }),
        }
    }

    /// Apply previously captured statistics (e.g. from a checkpoint) instead
    /// of recomputing them, keeping the model's input space fixed.
    pub fn standardize_with(&self, stats: &Standardization) -> Result<IndicatorTable> {
        let (n, c) = (self.grid_count(), self.feature_count());
        if stats.means.len() != c || stats.stdevs.len() != c {
            return Err(Error::InvalidConfig(format!(
                "standardization has {} columns, table has {c}",
                stats.means.len()
            )));
        }
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                let v = self.values.row(i)[j];
                data.push(if stats.stdevs[j] > 0.0 {
                    (v - stats.means[j]) / stats.stdevs[j]
                } else {
                    0.0
                });
            }
        }
        Ok(IndicatorTable {
            feature_names: self.feature_names.clone(),
            values: Tensor::matrix(n, c, data),
            stats: Some(stats.clone()),
        })
    }
}

/// City -> grid ownership map. A valid map partitions the grids.
#[derive(Debug, Clone, Default)]
pub struct InclusionMap {
    pub pairs: Vec<(UnitId, UnitId)>,
}

impl InclusionMap {
    pub fn new(pairs: Vec<(UnitId, UnitId)>) -> Self {
        Self { pairs }
    }

    pub fn city_count(&self) -> usize {
        self.pairs
            .iter()
            .map(|(c, _)| c.index + 1)
            .max()
            .unwrap_or(0)
    }

    /// `grid index -> city index`, verifying the partition property.
    pub fn city_of_grid(&self, n_mesh: usize) -> Result<Vec<usize>> {
        let n_city = self.city_count();
        let mut owner = vec![usize::MAX; n_mesh];
        let mut city_sizes = vec![0usize; n_city];
        for &(city, grid) in &self.pairs {
            if city.kind != UnitKind::City || grid.kind != UnitKind::Mesh {
                return Err(Error::InclusionNotPartition(format!(
                    "pair ({city}, {grid}) must be (city, mesh)"
                )));
            }
            if grid.index >= n_mesh {
                return Err(Error::UnknownUnit(grid));
            }
            if owner[grid.index] != usize::MAX {
                return Err(Error::InclusionNotPartition(format!(
                    "grid {} appears in more than one city",
                    grid.index
                )));
            }
            owner[grid.index] = city.index;
            city_sizes[city.index] += 1;
        }
        if let Some(orphan) = owner.iter().position(|&c| c == usize::MAX) {
            return Err(Error::InclusionNotPartition(format!(
                "grid {orphan} belongs to no city"
            )));
        }
        if let Some(empty) = city_sizes.iter().position(|&s| s == 0) {
            return Err(Error::InclusionNotPartition(format!(
                "city {empty} owns no grids"
            )));
        }
        Ok(owner)
    }

    pub fn members(&self, city: usize) -> Vec<usize> {
        self.pairs
            .iter()
            .filter(|(c, _)| c.index == city)
            .map(|(_, g)| g.index)
            .collect()
    }
}

/// Edge taxonomy of the hierarchical urban graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeType {
    M2M,
    M2C,
    C2M,
    Includes,
    In,
    Geo,
}

impl EdgeType {
    pub const ALL: [EdgeType; 6] = [
        EdgeType::M2M,
        EdgeType::M2C,
        EdgeType::C2M,
        EdgeType::Includes,
        EdgeType::In,
        EdgeType::Geo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeType::M2M => "m2m",
            EdgeType::M2C => "m2c",
            EdgeType::C2M => "c2m",
            EdgeType::Includes => "includes",
            EdgeType::In => "in",
            EdgeType::Geo => "geo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        EdgeType::ALL.iter().copied().find(|e| e.as_str() == s)
    }

    /// (source kind, target kind), fixed per type, so each edge type names
    /// exactly one meta-relation.
    pub fn endpoint_kinds(self) -> (UnitKind, UnitKind) {
        match self {
            EdgeType::M2M | EdgeType::Geo => (UnitKind::Mesh, UnitKind::Mesh),
            EdgeType::M2C | EdgeType::In => (UnitKind::Mesh, UnitKind::City),
            EdgeType::C2M | EdgeType::Includes => (UnitKind::City, UnitKind::Mesh),
        }
    }

    pub fn is_flow(self) -> bool {
        matches!(self, EdgeType::M2M | EdgeType::M2C | EdgeType::C2M)
    }
}

/// Directed edge between per-kind dense indices. Flow edges carry the observed
/// volume (a regression target only); structural edges carry none.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub volume: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphOptions {
    /// Connect each grid to its <= 8 planar lattice neighbours.
    pub geo_edges: bool,
}

/// The typed directed graph over mesh and city nodes.
#[derive(Debug, Clone)]
pub struct HeteroGraph {
    pub n_mesh: usize,
    pub n_city: usize,
    pub edges: BTreeMap<EdgeType, Vec<Edge>>,
    pub grid_coords: Option<Vec<[f64; 2]>>,
    /// Indicator rows attached at build time (standardized or raw).
    pub indicators: IndicatorTable,
    /// Grid index -> owning city index.
    pub city_of_grid: Vec<usize>,
}

impl HeteroGraph {
    pub fn node_count(&self, kind: UnitKind) -> usize {
        match kind {
            UnitKind::Mesh => self.n_mesh,
            UnitKind::City => self.n_city,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_mesh + self.n_city
    }

    /// Node id in the unified `[mesh rows, city rows]` ordering.
    pub fn global_id(&self, unit: UnitId) -> usize {
        match unit.kind {
            UnitKind::Mesh => unit.index,
            UnitKind::City => self.n_mesh + unit.index,
        }
    }

    pub fn edges_of(&self, ty: EdgeType) -> &[Edge] {
        self.edges.get(&ty).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn edge_count(&self, ty: EdgeType) -> usize {
        self.edges_of(ty).len()
    }

    /// City centroid = mean of member grid centroids. Requires coordinates.
    pub fn city_centroids(&self) -> Option<Vec<[f64; 2]>> {
        let coords = self.grid_coords.as_ref()?;
        let mut sums = vec![[0.0; 2]; self.n_city];
        let mut counts = vec![0usize; self.n_city];
        for (g, &c) in self.city_of_grid.iter().enumerate() {
            sums[c][0] += coords[g][0];
            sums[c][1] += coords[g][1];
            counts[c] += 1;
        }
        Some(
            sums.iter()
                .zip(&counts)
                .map(|(s, &n)| [s[0] / n as f64, s[1] / n as f64])
                .collect(),
        )
    }
}

/// Assemble the typed graph. One edge per flow record under its type, one
/// `includes` edge per inclusion pair with a mirrored `in` edge, and optional
/// `geo` lattice edges.
pub fn build_graph(
    indicators: &IndicatorTable,
    inclusion: &InclusionMap,
    flows: &[FlowRecord],
    coords: Option<&[[f64; 2]]>,
    options: &GraphOptions,
) -> Result<HeteroGraph> {
    let n_mesh = indicators.grid_count();
    let city_of_grid = inclusion.city_of_grid(n_mesh)?;
    let n_city = inclusion.city_count();

    let mut edges: BTreeMap<EdgeType, Vec<Edge>> = BTreeMap::new();
    for record in flows {
        let check = |u: UnitId| -> Result<()> {
            let bound = match u.kind {
                UnitKind::Mesh => n_mesh,
                UnitKind::City => n_city,
            };
            if u.index >= bound {
                return Err(Error::UnknownUnit(u));
            }
            Ok(())
        };
        check(record.origin)?;
        check(record.destination)?;
        if record.volume < 0.0 {
            return Err(Error::NegativeVolume {
                origin: record.origin,
                destination: record.destination,
                volume: record.volume,
            });
        }
        edges
            .entry(record.kind().edge_type())
            .or_default()
            .push(Edge {
                source: record.origin.index,
                target: record.destination.index,
                volume: Some(record.volume),
            });
    }

    let includes: Vec<Edge> = inclusion
        .pairs
        .iter()
        .map(|&(c, g)| Edge {
            source: c.index,
            target: g.index,
            volume: None,
        })
        .collect();
    let inverse: Vec<Edge> = includes
        .iter()
        .map(|e| Edge {
            source: e.target,
            target: e.source,
            volume: None,
        })
        .collect();
    edges.insert(EdgeType::Includes, includes);
    edges.insert(EdgeType::In, inverse);

    if options.geo_edges {
        let coords = coords.ok_or_else(|| {
            Error::InvalidConfig("geo edges requested but no grid coordinates given".into())
        })?;
        edges.insert(EdgeType::Geo, lattice_neighbors(coords));
    }

    Ok(HeteroGraph {
        n_mesh,
        n_city,
        edges,
        grid_coords: coords.map(|c| c.to_vec()),
        indicators: indicators.clone(),
        city_of_grid,
    })
}

/// Moore-neighbourhood edges: grid `a -> b` when `b`'s centroid falls inside
/// the 3x3 box around `a` at the lattice pitch. Interior grids of a regular
/// lattice get exactly eight.
fn lattice_neighbors(coords: &[[f64; 2]]) -> Vec<Edge> {
    let pitch_along = |axis: usize| -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in coords.iter().enumerate() {
            for b in coords.iter().skip(i + 1) {
                let d = (a[axis] - b[axis]).abs();
                if d > 1e-12 && d < best {
                    best = d;
                }
            }
        }
        best
    };
    let hx = pitch_along(0);
    let hy = pitch_along(1);
    let mut out = Vec::new();
    for (i, a) in coords.iter().enumerate() {
        for (j, b) in coords.iter().enumerate() {
            if i == j {
                continue;
            }
            let dx = (a[0] - b[0]).abs();
            let dy = (a[1] - b[1]).abs();
            if dx <= 1.05 * hx && dy <= 1.05 * hy && (dx > 1e-12 || dy > 1e-12) {
                out.push(Edge {
                    source: i,
                    target: j,
                    volume: None,
                });
            }
        }
    }
    out
}

/// Train/validation/test partition of the flow records, per task.
#[derive(Debug, Clone)]
pub struct EdgeSplit {
    pub train: PerTask<Vec<FlowRecord>>,
    pub val: PerTask<Vec<FlowRecord>>,
    pub test: PerTask<Vec<FlowRecord>>,
    pub seed: u64,
}

impl EdgeSplit {
    /// All training records across tasks, for rebuilding the message-passing graph.
    pub fn train_records(&self) -> Vec<FlowRecord> {
        let mut out = Vec::new();
        for (_, records) in self.train.iter() {
            out.extend_from_slice(records);
        }
        out
    }
}

/// Seeded uniform partition of the records, independently per flow type.
pub fn split_edges(flows: &[FlowRecord], ratios: (f64, f64, f64), seed: u64) -> Result<EdgeSplit> {
    let (tr, va, te) = ratios;
    let sum = tr + va + te;
    if tr <= 0.0 || va <= 0.0 || te <= 0.0 || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios([tr, va, te]));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = EdgeSplit {
        train: PerTask::default(),
        val: PerTask::default(),
        test: PerTask::default(),
        seed,
    };
    for kind in FlowKind::ALL {
        let mut group: Vec<FlowRecord> =
            flows.iter().filter(|r| r.kind() == kind).copied().collect();
        group.shuffle(&mut rng);
        let n = group.len();
        let n_train = (((n as f64) * tr).round() as usize).min(n);
        let n_val = (((n as f64) * va).round() as usize).min(n - n_train);
        let test_rest = group.split_off(n_train + n_val);
        let val_rest = group.split_off(n_train);
        *split.train.get_mut(kind) = group;
        *split.val.get_mut(kind) = val_rest;
        *split.test.get_mut(kind) = test_rest;
    }
    Ok(split)
}
