//! Integrated-gradients attribution over grid indicators and per-edge message
//! masks, and the regional summary ranking the grids that dominate a city's
//! inter-level flow predictions.
//!
//! Attribution follows the straight path from a zero baseline (zero
//! standardized features, zero edge masks) to the actual input, with a
//! right-endpoint Riemann sum: `attr_i = x_i * (1/S) sum_{s=1..S} dF(s/S * x)/dx_i`.
//! The completeness gap `|sum attr - (F(x) - F(0))|` is reported per target
//! edge, never dropped.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeSplit, EdgeType, FlowKind, FlowRecord, HeteroGraph, UnitId, UnitKind};
use crate::model::{decode_pairs, encode_with_features, params_on_tape, ModelParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    /// Zero standardized features and zero edge masks (the "average grid").
    ZeroFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRequest {
    pub target_city: UnitId,
    pub k: usize,
    pub steps: usize,
    pub baseline: Baseline,
}

impl AttributionRequest {
    pub fn new(target_city: UnitId) -> Self {
        Self {
            target_city,
            k: 10,
            steps: 128,
            baseline: Baseline::ZeroFeatures,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidConfig("attribution k must be >= 1".into()));
        }
        if self.steps < 2 {
            return Err(Error::InvalidConfig(
                "attribution steps must be >= 2".into(),
            ));
        }
        if self.target_city.kind != UnitKind::City {
            return Err(Error::InvalidConfig(
                "attribution target must be a city".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureCategory {
    Roads,
    Pois,
    Population,
    Railway,
    Other,
}

impl FeatureCategory {
    pub fn of_name(name: &str) -> Self {
        if name.starts_with("road") {
            FeatureCategory::Roads
        } else if name.starts_with("poi") {
            FeatureCategory::Pois
        } else if name.starts_with("population") {
            FeatureCategory::Population
        } else if name.starts_with("railway") {
            FeatureCategory::Railway
        } else {
            FeatureCategory::Other
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureCategory::Roads => "roads",
            FeatureCategory::Pois => "pois",
            FeatureCategory::Population => "population",
            FeatureCategory::Railway => "railway",
            FeatureCategory::Other => "other",
        }
    }
}

/// The `k` largest-volume inter-level records touching the city, ties broken
/// by volume desc, then origin index asc, then destination index asc. Fewer
/// than `k` are returned when fewer exist.
pub fn select_target_edges(split: &EdgeSplit, city: UnitId, k: usize) -> Result<Vec<FlowRecord>> {
    let mut candidates: Vec<FlowRecord> = Vec::new();
    for group in [&split.train, &split.val, &split.test] {
        for kind in [FlowKind::M2C, FlowKind::C2M] {
            for r in group.get(kind) {
                let touches = match kind {
                    FlowKind::M2C => r.destination == city,
                    _ => r.origin == city,
                };
                if touches {
                    candidates.push(*r);
                }
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::NoInterLevelFlows(city));
    }
    candidates.sort_by(|a, b| {
        b.volume
            .partial_cmp(&a.volume)
            .unwrap()
            .then(a.origin.index.cmp(&b.origin.index))
            .then(a.destination.index.cmp(&b.destination.index))
    });
    candidates.truncate(k);
    Ok(candidates)
}

/// Path-integrated gradients of a scalar function from a zero baseline to `x`,
/// using a right-endpoint Riemann sum. Returns the per-coordinate
/// attributions, `f(x)`, and `f(0)`.
pub fn path_integrated_gradients(
    x: &Tensor,
    steps: usize,
    f: impl Fn(&mut Tape, Var) -> Var,
) -> Result<(Vec<f64>, f64, f64)> {
    if steps == 0 {
        return Err(Error::InvalidConfig(
            "integration steps must be >= 1".into(),
        ));
    }
    let eval = |point: Tensor, with_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let input = if with_grad {
            tape.param(point)
        } else {
            tape.leaf(point)
        };
        let y = f(&mut tape, input);
        let value = tape.value(y).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                loss: value,
            });
        }
        if with_grad {
            tape.backward(y);
            let grad = tape
                .grad(input)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; x.len()]);
            Ok((value, Some(grad)))
        } else {
            Ok((value, None))
        }
    };

    let mut grad_sum = vec![0.0; x.len()];
    let mut f_x = 0.0;
    for s in 1..=steps {
        let alpha = s as f64 / steps as f64;
        let point = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|v| alpha * v).collect(),
        );
        let (value, grad) = eval(point, true)?;
        let grad = grad.expect("gradient requested");
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                epoch: 0,
                loss: f64::NAN,
            });
        }
        for (acc, g) in grad_sum.iter_mut().zip(&grad) {
            *acc += g;
        }
        if s == steps {
            f_x = value;
        }
    }
    let (f_baseline, _) = eval(Tensor::zeros(x.shape().to_vec()), false)?;
    let attributions = x
        .data()
        .iter()
        .zip(&grad_sum)
        .map(|(xi, g)| xi * g / steps as f64)
        .collect();
    Ok((attributions, f_x, f_baseline))
}

/// Attribution of one target edge's prediction.
#[derive(Debug, Clone)]
pub struct IgRun {
    pub target_edge: FlowRecord,
    /// `n_mesh x feature_count` signed attributions.
    pub feature_attributions: Tensor,
    /// Per message-passing edge type, one signed attribution per edge.
    pub edge_attributions: BTreeMap<EdgeType, Vec<f64>>,
    pub prediction: f64,
    pub baseline_prediction: f64,
    pub completeness_gap: f64,
}

fn active_edge_types(params: &ModelParams<Tensor>, graph: &HeteroGraph) -> Vec<(EdgeType, usize)> {
    params
        .config
        .edge_types
        .iter()
        .filter_map(|&ty| {
            let n = graph.edges_of(ty).len();
            (n > 0).then_some((ty, n))
        })
        .collect()
}

/// Integrated gradients for one target edge over all grid feature rows plus a
/// multiplicative per-edge message mask (mask 1 = edge present).
pub fn integrated_gradients(
    params: &ModelParams<Tensor>,
    graph: &HeteroGraph,
    target_edge: &FlowRecord,
    steps: usize,
) -> Result<IgRun> {
    if graph.indicators.stats.is_none() {
        return Err(Error::Unstandardized);
    }
    let features = &graph.indicators.values;
    let (n_mesh, n_feat) = (features.rows(), features.cols());
    let active = active_edge_types(params, graph);
    let n_edges: usize = active.iter().map(|(_, n)| n).sum();

    // One flat input: the feature matrix, then each edge type's mask block.
    let mut flat = features.data().to_vec();
    flat.extend(std::iter::repeat_n(1.0, n_edges));
    let x = Tensor::vector(flat);

    let pair = (target_edge.origin, target_edge.destination);
    let task = target_edge.kind();
    let f = |tape: &mut Tape, input: Var| -> Var {
        let (view, _) = params_on_tape(tape, params, false);
        let feat_block = tape.slice_rows(input, 0, n_mesh * n_feat);
        let feat = tape.reshape(feat_block, vec![n_mesh, n_feat]);
        let mut masks = BTreeMap::new();
        let mut offset = n_mesh * n_feat;
        for &(ty, count) in &active {
            let block = tape.slice_rows(input, offset, count);
            let mask = tape.reshape(block, vec![count]);
            masks.insert(ty, mask);
            offset += count;
        }
        let embeddings = encode_with_features(tape, &view, graph, feat, Some(&masks), None);
        let pred =
            decode_pairs(tape, &view, graph, embeddings, &[pair], task).expect("validated pair");
        tape.reshape(pred, vec![])
    };

    let (attr, f_x, f_baseline) = path_integrated_gradients(&x, steps, f)?;

    let feature_attributions = Tensor::matrix(n_mesh, n_feat, attr[..n_mesh * n_feat].to_vec());
    let mut edge_attributions = BTreeMap::new();
    let mut offset = n_mesh * n_feat;
    for &(ty, count) in &active {
        edge_attributions.insert(ty, attr[offset..offset + count].to_vec());
        offset += count;
    }
    let total: f64 = attr.iter().sum();
    Ok(IgRun {
        target_edge: *target_edge,
        feature_attributions,
        edge_attributions,
        prediction: f_x,
        baseline_prediction: f_baseline,
        completeness_gap: (total - (f_x - f_baseline)).abs(),
    })
}

/// Aggregated attribution report for one city.
#[derive(Debug, Clone)]
pub struct AttributionReport {
    pub target_edges: Vec<FlowRecord>,
    /// Completeness gap per target edge, parallel to `target_edges`.
    pub completeness_gaps: Vec<f64>,
    /// `n_mesh x feature_count`, absolute attributions summed across edges.
    pub feature_attributions: Tensor,
    pub edge_attributions: BTreeMap<EdgeType, Vec<f64>>,
    pub category_rollup: Vec<(FeatureCategory, f64)>,
    /// Member grids of the target city ranked by attribution mass, descending.
    pub grid_ranking: Vec<(usize, f64)>,
    pub feature_names: Vec<String>,
}

impl AttributionReport {
    /// Rollup rescaled so the largest category is 1.
    pub fn normalized_rollup(&self) -> Vec<(FeatureCategory, f64)> {
        let max = self
            .category_rollup
            .iter()
            .map(|(_, v)| *v)
            .fold(0.0f64, f64::max);
        self.category_rollup
            .iter()
            .map(|&(c, v)| (c, if max > 0.0 { v / max } else { 0.0 }))
            .collect()
    }

    pub fn total_feature_attribution(&self) -> f64 {
        self.feature_attributions.data().iter().sum()
    }

    /// `grid_id,category,attribution` rows for the member grids.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("grid_id,category,attribution\n");
        let categories: Vec<FeatureCategory> = self
            .feature_names
            .iter()
            .map(|n| FeatureCategory::of_name(n))
            .collect();
        for &(grid, _) in &self.grid_ranking {
            let row = self.feature_attributions.row(grid);
            let mut per_cat: BTreeMap<FeatureCategory, f64> = BTreeMap::new();
            for (j, v) in row.iter().enumerate() {
                *per_cat.entry(categories[j]).or_default() += v;
            }
            for (cat, value) in per_cat {
                use std::fmt::Write as _;
                let _ = writeln!(out, "{grid},{},{value}", cat.as_str());
            }
        }
        out
    }
}

impl fmt::Display for AttributionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "target_edges={}", self.target_edges.len())?;
        for (r, gap) in self.target_edges.iter().zip(&self.completeness_gaps) {
            writeln!(
                f,
                "edge origin={} dest={} volume={} completeness_gap={gap}",
                r.origin, r.destination, r.volume
            )?;
        }
        for (cat, v) in &self.category_rollup {
            writeln!(f, "category {} attribution={v}", cat.as_str())?;
        }
        for (grid, mass) in self.grid_ranking.iter().take(10) {
            writeln!(f, "grid {grid} attribution={mass}")?;
        }
        Ok(())
    }
}

/// Run IG for the city's top inter-level edges and aggregate by summing
/// absolute attributions. `workers` bounds thread parallelism across edges.
pub fn regional_summary(
    params: &ModelParams<Tensor>,
    graph: &HeteroGraph,
    split: &EdgeSplit,
    request: &AttributionRequest,
    workers: usize,
) -> Result<AttributionReport> {
    request.validate()?;
    if request.target_city.index >= graph.n_city {
        return Err(Error::UnknownUnit(request.target_city));
    }
    let edges = select_target_edges(split, request.target_city, request.k)?;

    let workers = workers.max(1).min(edges.len());
    let runs: Vec<Result<IgRun>> = if workers <= 1 {
        edges
            .iter()
            .map(|e| integrated_gradients(params, graph, e, request.steps))
            .collect()
    } else {
        let chunk_size = edges.len().div_ceil(workers);
        let mut slots: Vec<Option<Result<IgRun>>> = (0..edges.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            for (chunk, slot_chunk) in edges.chunks(chunk_size).zip(slots.chunks_mut(chunk_size)) {
                scope.spawn(move || {
                    for (edge, slot) in chunk.iter().zip(slot_chunk.iter_mut()) {
                        *slot = Some(integrated_gradients(params, graph, edge, request.steps));
                    }
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("worker filled slot"))
            .collect()
    };

    let (n_mesh, n_feat) = (
        graph.indicators.values.rows(),
        graph.indicators.values.cols(),
    );
    let mut feature_acc = vec![0.0; n_mesh * n_feat];
    let mut edge_acc: BTreeMap<EdgeType, Vec<f64>> = BTreeMap::new();
    let mut gaps = Vec::with_capacity(edges.len());
    for run in runs {
        let run = run?;
        for (acc, v) in feature_acc.iter_mut().zip(run.feature_attributions.data()) {
            *acc += v.abs();
        }
        for (ty, values) in run.edge_attributions {
            let acc = edge_acc
                .entry(ty)
                .or_insert_with(|| vec![0.0; values.len()]);
            for (a, v) in acc.iter_mut().zip(&values) {
                *a += v.abs();
            }
        }
        gaps.push(run.completeness_gap);
    }

    let feature_attributions = Tensor::matrix(n_mesh, n_feat, feature_acc);
    let names = graph.indicators.feature_names.clone();
    let mut rollup: BTreeMap<FeatureCategory, f64> = BTreeMap::new();
    for (j, name) in names.iter().enumerate() {
        let cat = FeatureCategory::of_name(name);
        let column_sum: f64 = (0..n_mesh).map(|i| feature_attributions.row(i)[j]).sum();
        *rollup.entry(cat).or_default() += column_sum;
    }

    let mut grid_ranking: Vec<(usize, f64)> = graph
        .city_of_grid
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == request.target_city.index)
        .map(|(g, _)| (g, feature_attributions.row(g).iter().sum::<f64>()))
        .collect();
    grid_ranking.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    Ok(AttributionReport {
        target_edges: edges,
        completeness_gaps: gaps,
        feature_attributions,
        edge_attributions: edge_acc,
        category_rollup: rollup.into_iter().collect(),
        grid_ranking,
        feature_names: names,
    })
}
