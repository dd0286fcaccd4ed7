//! The hierarchical encoder and its task decoders.
//!
//! Each layer computes, per edge `(s, e, t)` and head `i`, an unnormalized
//! score `(K_i(s) W_att_e . Q_i(t)) * mu_e / sqrt(d_head)`, normalizes scores
//! with a softmax over all incoming edges of `t` jointly across edge types,
//! and aggregates the attention-weighted per-head messages
//! `M_i(s) W_msg_e` into the target. Heads are concatenated, and the layer
//! output is `A(act(aggregate) + previous)` with a leaky rectifier (slope 0.2).
//! A node with no incoming edges keeps its residual path only.
//!
//! Grid rows are initialized by a linear projection of the standardized
//! indicators; city rows come from a trainable embedding table. Decoders are
//! two-layer perceptrons over concatenated pair embeddings with a softplus
//! head, one independent set of weights per task.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeType, FlowKind, HeteroGraph, PerTask, UnitId, UnitKind};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub edge_types: Vec<EdgeType>,
    pub decoder_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            heads: 8,
            layers: 3,
            edge_types: vec![
                EdgeType::M2M,
                EdgeType::M2C,
                EdgeType::C2M,
                EdgeType::Includes,
                EdgeType::In,
            ],
            decoder_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::InvalidConfig("layers must be >= 1".into()));
        }
        if self.decoder_hidden == 0 {
            return Err(Error::InvalidConfig("decoder_hidden must be >= 1".into()));
        }
        let mut seen = self.edge_types.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.edge_types.len() {
            return Err(Error::InvalidConfig("duplicate edge type in config".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// A weight matrix with its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPair<T> {
    pub w: T,
    pub b: T,
}

/// Per-node-type projections of one layer: per-head key/query/message maps
/// plus the aggregation map.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTypeParams<T> {
    pub key: Vec<LinearPair<T>>,
    pub query: Vec<LinearPair<T>>,
    pub message: Vec<LinearPair<T>>,
    pub aggregate: LinearPair<T>,
}

/// Per-edge-type relation matrices and the meta-relation scaling. Every edge
/// type here has fixed endpoint kinds, so each one names exactly one
/// (source type, edge type, target type) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTypeParams<T> {
    pub w_att: Vec<T>,
    pub w_msg: Vec<T>,
    pub mu: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub mesh: NodeTypeParams<T>,
    pub city: NodeTypeParams<T>,
    pub edges: Vec<(EdgeType, EdgeTypeParams<T>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T> {
    pub hidden: LinearPair<T>,
    pub out: LinearPair<T>,
}

/// All learnable state, generic over the storage: `Tensor` for owned values,
/// [`Var`] for a view recorded on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub config: ModelConfig,
    pub grid_proj: LinearPair<T>,
    pub city_table: T,
    pub layers: Vec<LayerParams<T>>,
    pub decoders: PerTask<DecoderParams<T>>,
}

impl<T> ModelParams<T> {
    /// Rebuild the structure through `f`, visiting every tensor exactly once
    /// in the canonical (checkpoint) order.
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        let lin = |f: &mut dyn FnMut(&str, &T) -> U, path: &str, l: &LinearPair<T>| LinearPair {
            w: f(&format!("{path}.w"), &l.w),
            b: f(&format!("{path}.b"), &l.b),
        };
        let node =
            |f: &mut dyn FnMut(&str, &T) -> U, path: &str, n: &NodeTypeParams<T>| NodeTypeParams {
                key: n
                    .key
                    .iter()
                    .enumerate()
                    .map(|(i, l)| lin(f, &format!("{path}.key{i}"), l))
                    .collect(),
                query: n
                    .query
                    .iter()
                    .enumerate()
                    .map(|(i, l)| lin(f, &format!("{path}.query{i}"), l))
                    .collect(),
                message: n
                    .message
                    .iter()
                    .enumerate()
                    .map(|(i, l)| lin(f, &format!("{path}.message{i}"), l))
                    .collect(),
                aggregate: lin(f, &format!("{path}.aggregate"), &n.aggregate),
            };
        ModelParams {
            config: self.config.clone(),
            grid_proj: lin(f, "grid_proj", &self.grid_proj),
            city_table: f("city_table", &self.city_table),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| LayerParams {
                    mesh: node(f, &format!("layer{l}.mesh"), &layer.mesh),
                    city: node(f, &format!("layer{l}.city"), &layer.city),
                    edges: layer
                        .edges
                        .iter()
                        .map(|(ty, e)| {
                            let base = format!("layer{l}.edge.{}", ty.as_str());
                            (
                                *ty,
                                EdgeTypeParams {
                                    w_att: e
                                        .w_att
                                        .iter()
                                        .enumerate()
                                        .map(|(i, t)| f(&format!("{base}.w_att{i}"), t))
                                        .collect(),
                                    w_msg: e
                                        .w_msg
                                        .iter()
                                        .enumerate()
                                        .map(|(i, t)| f(&format!("{base}.w_msg{i}"), t))
                                        .collect(),
                                    mu: f(&format!("{base}.mu"), &e.mu),
                                },
                            )
                        })
                        .collect(),
                })
                .collect(),
            decoders: self.decoders.map(|kind, d| DecoderParams {
                hidden: lin(f, &format!("decoder.{}.hidden", kind.as_str()), &d.hidden),
                out: lin(f, &format!("decoder.{}.out", kind.as_str()), &d.out),
            }),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(&str, &T)) {
        self.map(&mut |name, t| f(name, t));
    }

    /// Mutable visit in the same canonical order as [`ModelParams::map`].
    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        let lin = |f: &mut dyn FnMut(&mut T), l: &mut LinearPair<T>| {
            f(&mut l.w);
            f(&mut l.b);
        };
        let node = |f: &mut dyn FnMut(&mut T), n: &mut NodeTypeParams<T>| {
            for l in &mut n.key {
                lin(f, l);
            }
            for l in &mut n.query {
                lin(f, l);
            }
            for l in &mut n.message {
                lin(f, l);
            }
            lin(f, &mut n.aggregate);
        };
        lin(f, &mut self.grid_proj);
        f(&mut self.city_table);
        for layer in &mut self.layers {
            node(f, &mut layer.mesh);
            node(f, &mut layer.city);
            for (_, e) in &mut layer.edges {
                for t in &mut e.w_att {
                    f(t);
                }
                for t in &mut e.w_msg {
                    f(t);
                }
                f(&mut e.mu);
            }
        }
        for kind in FlowKind::ALL {
            let d = self.decoders.get_mut(kind);
            lin(f, &mut d.hidden);
            lin(f, &mut d.out);
        }
    }
}

impl ModelParams<Tensor> {
    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, _| n += 1);
        n
    }

    pub fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.len());
        n
    }
}

/// Deterministic Glorot-uniform initialization; biases zero, scalings one.
pub fn init_params(
    config: &ModelConfig,
    n_city: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<ModelParams<Tensor>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.embed_dim;
    let dk = config.head_dim();

    let lin = |rng: &mut ChaCha8Rng, din: usize, dout: usize| LinearPair {
        w: Tensor::glorot_uniform(rng, din, dout),
        b: Tensor::zeros(vec![dout]),
    };
    let node = |rng: &mut ChaCha8Rng| NodeTypeParams {
        key: (0..config.heads).map(|_| lin(rng, d, dk)).collect(),
        query: (0..config.heads).map(|_| lin(rng, d, dk)).collect(),
        message: (0..config.heads).map(|_| lin(rng, d, dk)).collect(),
        aggregate: lin(rng, d, d),
    };

    let grid_proj = lin(&mut rng, feature_dim, d);
    let city_table = Tensor::glorot_uniform(&mut rng, n_city, d);
    let layers = (0..config.layers)
        .map(|_| LayerParams {
            mesh: node(&mut rng),
            city: node(&mut rng),
            edges: config
                .edge_types
                .iter()
                .map(|&ty| {
                    (
                        ty,
                        EdgeTypeParams {
                            w_att: (0..config.heads)
                                .map(|_| Tensor::glorot_uniform(&mut rng, dk, dk))
                                .collect(),
                            w_msg: (0..config.heads)
                                .map(|_| Tensor::glorot_uniform(&mut rng, dk, dk))
                                .collect(),
                            mu: Tensor::scalar(1.0),
                        },
                    )
                })
                .collect(),
        })
        .collect();
    let decoders = PerTask {
        c2m: (),
        m2c: (),
        m2m: (),
    }
    .map(|_, _| DecoderParams {
        hidden: lin(&mut rng, 2 * d, config.decoder_hidden),
        out: lin(&mut rng, config.decoder_hidden, 1),
    });

    Ok(ModelParams {
        config: config.clone(),
        grid_proj,
        city_table,
        layers,
        decoders,
    })
}

/// Record every parameter on the tape, tracked (trainable) or frozen.
pub fn params_on_tape(
    tape: &mut Tape,
    params: &ModelParams<Tensor>,
    trainable: bool,
) -> (ModelParams<Var>, Vec<Var>) {
    let mut order = Vec::new();
    let view = params.map(&mut |_, t: &Tensor| {
        let v = if trainable {
            tape.param(t.clone())
        } else {
            tape.leaf(t.clone())
        };
        order.push(v);
        v
    });
    (view, order)
}

/// Materialized per-type embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub mesh: Tensor,
    pub city: Tensor,
}

/// Pre-softmax scores and attention weights of one layer, for inspection.
pub struct LayerTrace {
    /// Per enabled edge type: per-head pre-softmax scores, one `[E]` vector each.
    pub scores: Vec<(EdgeType, Vec<Var>)>,
    /// Per-head normalized attention over the concatenated edge list.
    pub attention: Vec<Var>,
    /// Global target node id per concatenated edge.
    pub segments: Rc<Vec<usize>>,
}

struct EdgeIndex {
    ty: EdgeType,
    src: Rc<Vec<usize>>,
    tgt: Rc<Vec<usize>>,
    tgt_global: Vec<usize>,
}

fn edge_indices(graph: &HeteroGraph, config: &ModelConfig) -> Vec<EdgeIndex> {
    config
        .edge_types
        .iter()
        .filter_map(|&ty| {
            let edges = graph.edges_of(ty);
            if edges.is_empty() {
                return None;
            }
            let (_, tgt_kind) = ty.endpoint_kinds();
            let offset = match tgt_kind {
                UnitKind::Mesh => 0,
                UnitKind::City => graph.n_mesh,
            };
            Some(EdgeIndex {
                ty,
                src: Rc::new(edges.iter().map(|e| e.source).collect()),
                tgt: Rc::new(edges.iter().map(|e| e.target).collect()),
                tgt_global: edges.iter().map(|e| e.target + offset).collect(),
            })
        })
        .collect()
}

/// One attention layer over the unified `[mesh; city]` embedding matrix.
pub fn layer_forward(
    tape: &mut Tape,
    layer: &LayerParams<Var>,
    config: &ModelConfig,
    graph: &HeteroGraph,
    h_prev: Var,
    edge_masks: Option<&BTreeMap<EdgeType, Var>>,
    trace: Option<&mut Vec<LayerTrace>>,
) -> Var {
    let (n_mesh, n_city) = (graph.n_mesh, graph.n_city);
    let n = n_mesh + n_city;
    let dk = config.head_dim();
    let index = edge_indices(graph, config);

    let mesh_prev = tape.slice_rows(h_prev, 0, n_mesh);
    let city_prev = tape.slice_rows(h_prev, n_mesh, n_city);
    let prev_of = |kind: UnitKind| match kind {
        UnitKind::Mesh => mesh_prev,
        UnitKind::City => city_prev,
    };
    let node_params = |kind: UnitKind| match kind {
        UnitKind::Mesh => &layer.mesh,
        UnitKind::City => &layer.city,
    };

    // Per node type, per head projections.
    let mut keys: BTreeMap<UnitKind, Vec<Var>> = BTreeMap::new();
    let mut queries: BTreeMap<UnitKind, Vec<Var>> = BTreeMap::new();
    let mut messages: BTreeMap<UnitKind, Vec<Var>> = BTreeMap::new();
    for kind in [UnitKind::Mesh, UnitKind::City] {
        let p = node_params(kind);
        let h = prev_of(kind);
        keys.insert(
            kind,
            p.key.iter().map(|l| tape.linear(h, l.w, l.b)).collect(),
        );
        queries.insert(
            kind,
            p.query.iter().map(|l| tape.linear(h, l.w, l.b)).collect(),
        );
        messages.insert(
            kind,
            p.message.iter().map(|l| tape.linear(h, l.w, l.b)).collect(),
        );
    }

    let mut trace_entry = LayerTrace {
        scores: Vec::new(),
        attention: Vec::new(),
        segments: Rc::new(Vec::new()),
    };

    let aggregated = if index.is_empty() {
        tape.leaf(Tensor::zeros(vec![n, config.embed_dim]))
    } else {
        let segments: Rc<Vec<usize>> = Rc::new(
            index
                .iter()
                .flat_map(|e| e.tgt_global.iter().copied())
                .collect(),
        );
        let mask_cat = edge_masks.map(|masks| {
            let parts: Vec<Var> = index
                .iter()
                .map(|e| {
                    *masks
                        .get(&e.ty)
                        .expect("mask for every message-passing edge type")
                })
                .collect();
            let mut cat = parts[0];
            for &p in &parts[1..] {
                cat = tape.concat_rows(cat, p);
            }
            cat
        });

        let mut per_head_out = Vec::with_capacity(config.heads);
        for head in 0..config.heads {
            let mut score_parts = Vec::with_capacity(index.len());
            let mut msg_parts = Vec::with_capacity(index.len());
            for e in &index {
                let (src_kind, tgt_kind) = e.ty.endpoint_kinds();
                let params = layer
                    .edges
                    .iter()
                    .find(|(ty, _)| *ty == e.ty)
                    .map(|(_, p)| p)
                    .expect("edge params for enabled type");

                let k_edge = tape.gather_rows(keys[&src_kind][head], e.src.clone());
                let kw = tape.matmul(k_edge, params.w_att[head]);
                let q_edge = tape.gather_rows(queries[&tgt_kind][head], e.tgt.clone());
                let dot = tape.row_dot(kw, q_edge);
                let scaled = tape.scale_by_scalar(dot, params.mu);
                let score = tape.scale(scaled, 1.0 / (dk as f64).sqrt());
                score_parts.push(score);

                let m_edge = tape.gather_rows(messages[&src_kind][head], e.src.clone());
                msg_parts.push(tape.matmul(m_edge, params.w_msg[head]));
            }

            if trace.is_some() {
                for (e, &score) in index.iter().zip(&score_parts) {
                    match trace_entry.scores.iter_mut().find(|(ty, _)| *ty == e.ty) {
                        Some((_, v)) => v.push(score),
                        None => trace_entry.scores.push((e.ty, vec![score])),
                    }
                }
            }

            let mut scores = score_parts[0];
            let mut msgs = msg_parts[0];
            for i in 1..score_parts.len() {
                scores = tape.concat_rows(scores, score_parts[i]);
                msgs = tape.concat_rows(msgs, msg_parts[i]);
            }

            let attention = tape.segment_softmax(scores, segments.clone());
            trace_entry.attention.push(attention);
            let att_flat = tape.reshape(attention, vec![segments.len()]);
            let mut weighted = tape.scale_rows(msgs, att_flat);
            if let Some(mask) = mask_cat {
                let mask_flat = tape.reshape(mask, vec![segments.len()]);
                weighted = tape.scale_rows(weighted, mask_flat);
            }
            per_head_out.push(tape.scatter_sum(weighted, segments.clone(), n));
        }
        trace_entry.segments = segments;
        tape.merge_heads(&per_head_out)
    };

    if let Some(trace) = trace {
        trace.push(trace_entry);
    }

    let activated = tape.leaky_relu(aggregated, LEAKY_SLOPE);
    let residual = tape.add(activated, h_prev);
    let mesh_res = tape.slice_rows(residual, 0, n_mesh);
    let city_res = tape.slice_rows(residual, n_mesh, n_city);
    let mesh_out = tape.linear(mesh_res, layer.mesh.aggregate.w, layer.mesh.aggregate.b);
    let city_out = tape.linear(city_res, layer.city.aggregate.w, layer.city.aggregate.b);
    tape.concat_rows(mesh_out, city_out)
}

/// Initialize node rows and run the configured number of layers. `features`
/// is the (standardized) `n_mesh x feature_dim` indicator matrix as a tape
/// value, so attribution runs can differentiate with respect to it.
pub fn encode_with_features(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    graph: &HeteroGraph,
    features: Var,
    edge_masks: Option<&BTreeMap<EdgeType, Var>>,
    mut trace: Option<&mut Vec<LayerTrace>>,
) -> Var {
    let grid_rows = tape.linear(features, params.grid_proj.w, params.grid_proj.b);
    let mut h = tape.concat_rows(grid_rows, params.city_table);
    for layer in &params.layers {
        h = layer_forward(
            tape,
            layer,
            &params.config,
            graph,
            h,
            edge_masks,
            trace.as_deref_mut(),
        );
    }
    h
}

/// Encode using the indicators attached to the graph, which must be standardized.
pub fn encode(tape: &mut Tape, params: &ModelParams<Var>, graph: &HeteroGraph) -> Result<Var> {
    if graph.indicators.stats.is_none() {
        return Err(Error::Unstandardized);
    }
    let features = tape.leaf(graph.indicators.values.clone());
    Ok(encode_with_features(
        tape, params, graph, features, None, None,
    ))
}

/// Convenience no-grad encode returning materialized per-type embeddings.
pub fn run_encoder(params: &ModelParams<Tensor>, graph: &HeteroGraph) -> Result<Embeddings> {
    let mut tape = Tape::new();
    let (view, _) = params_on_tape(&mut tape, params, false);
    let h = encode(&mut tape, &view, graph)?;
    let all = tape.value(h);
    let d = all.cols();
    let mesh = Tensor::matrix(graph.n_mesh, d, all.data()[..graph.n_mesh * d].to_vec());
    let city = Tensor::matrix(graph.n_city, d, all.data()[graph.n_mesh * d..].to_vec());
    Ok(Embeddings { mesh, city })
}

/// Predict non-negative volumes for `(origin, destination)` pairs of one task
/// from the unified embedding matrix.
pub fn decode_pairs(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    graph: &HeteroGraph,
    embeddings: Var,
    pairs: &[(UnitId, UnitId)],
    task: FlowKind,
) -> Result<Var> {
    let (origin_kind, dest_kind) = task.endpoint_kinds();
    for (o, d) in pairs {
        if o.kind != origin_kind || d.kind != dest_kind {
            return Err(Error::InvalidConfig(format!(
                "pair {o} -> {d} does not match task {}",
                task.as_str()
            )));
        }
    }
    let origin_ids: Rc<Vec<usize>> =
        Rc::new(pairs.iter().map(|(o, _)| graph.global_id(*o)).collect());
    let dest_ids: Rc<Vec<usize>> =
        Rc::new(pairs.iter().map(|(_, d)| graph.global_id(*d)).collect());
    let origin_rows = tape.gather_rows(embeddings, origin_ids);
    let dest_rows = tape.gather_rows(embeddings, dest_ids);
    let joint = tape.concat_cols(origin_rows, dest_rows);
    let decoder = params.decoders.get(task);
    let hidden = tape.linear(joint, decoder.hidden.w, decoder.hidden.b);
    let hidden = tape.relu(hidden);
    let out = tape.linear(hidden, decoder.out.w, decoder.out.b);
    let positive = tape.softplus(out);
    Ok(tape.reshape(positive, vec![pairs.len()]))
}

/// Closed-form learnable scalar count for a config and world size.
pub fn expected_param_count(config: &ModelConfig, n_city: usize, feature_dim: usize) -> usize {
    let d = config.embed_dim;
    let dk = config.head_dim();
    let h = config.heads;
    let per_node_type = 3 * h * (d * dk + dk) + (d * d + d);
    let per_edge_type = 2 * h * dk * dk + 1;
    let per_layer = 2 * per_node_type + config.edge_types.len() * per_edge_type;
    let decoders =
        3 * ((2 * d * config.decoder_hidden + config.decoder_hidden) + (config.decoder_hidden + 1));
    (feature_dim * d + d) + n_city * d + config.layers * per_layer + decoders
}
