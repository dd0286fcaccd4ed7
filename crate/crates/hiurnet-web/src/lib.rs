//! Browser demo bindings. Three interactive operations over a synthetic
//! world: render the generated map, train the model incrementally with live
//! loss readings, and attribute a city's inter-level flows to its grids.
//!
//! All results cross the boundary as JSON strings; the static page does the
//! canvas drawing. Everything is seeded and single-threaded.

use wasm_bindgen::prelude::*;

use hiurnet::explain::{regional_summary, AttributionRequest};
use hiurnet::graph::{
    build_graph, split_edges, EdgeSplit, FlowKind, GraphOptions, HeteroGraph, UnitId,
};
use hiurnet::model::{decode_pairs, encode, init_params, params_on_tape, ModelConfig, ModelParams};
use hiurnet::synth::{generate_world, World, WorldConfig};
use hiurnet::tape::Tape;
use hiurnet::tensor::Tensor;
use hiurnet::train::{evaluate_model, focal_l2_on_tape, Adam, TrainConfig};
use serde_json::json;

fn world_config(
    seed: u64,
    cities: usize,
    grid_side: usize,
    density: f64,
    noise: f64,
) -> WorldConfig {
    WorldConfig {
        n_cities: cities,
        grid_side,
        flow_density: density,
        noise_sd: noise,
        seed,
        ..WorldConfig::default()
    }
}

fn err_to_js(e: hiurnet::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn world_json(world: &World, top_flows: usize) -> serde_json::Value {
    let table = &world.indicators;
    let population = table.column("population").unwrap_or_default();
    let road_total: Vec<f64> = (0..table.grid_count())
        .map(|g| table.values.row(g).iter().take(24).sum())
        .collect();
    let grids: Vec<serde_json::Value> = world
        .coords
        .iter()
        .enumerate()
        .map(|(g, c)| {
            json!({
                "id": g,
                "x": c[0],
                "y": c[1],
                "city": world.inclusion.pairs.iter().find(|(_, m)| m.index == g).map(|(c, _)| c.index),
                "population": population.get(g).copied().unwrap_or(0.0),
                "roads": road_total[g],
            })
        })
        .collect();

    let mut m2m: Vec<_> = world
        .flows
        .iter()
        .filter(|r| r.kind() == FlowKind::M2M)
        .collect();
    m2m.sort_by(|a, b| b.volume.partial_cmp(&a.volume).unwrap());
    let flows: Vec<serde_json::Value> = m2m
        .iter()
        .take(top_flows)
        .map(|r| {
            let o = world.coords[r.origin.index];
            let d = world.coords[r.destination.index];
            json!({ "ox": o[0], "oy": o[1], "dx": d[0], "dy": d[1], "volume": r.volume })
        })
        .collect();

    json!({
        "grids": grids,
        "flows": flows,
        "flow_count": world.flows.len(),
        "max_volume": m2m.first().map(|r| r.volume).unwrap_or(0.0),
    })
}

/// Generate a world and return its map payload without keeping any state.
#[wasm_bindgen]
pub fn generate_world_json(
    seed: u64,
    cities: usize,
    grid_side: usize,
    density: f64,
    noise: f64,
) -> Result<String, JsValue> {
    let world = generate_world(&world_config(seed, cities, grid_side, density, noise))
        .map_err(err_to_js)?;
    Ok(world_json(&world, 400).to_string())
}

/// One generated world plus an in-progress training run.
#[wasm_bindgen]
pub struct DemoSession {
    world: World,
    graph: HeteroGraph,
    split: EdgeSplit,
    params: ModelParams<Tensor>,
    adam: Adam,
    config: TrainConfig,
    epoch: usize,
}

#[wasm_bindgen]
impl DemoSession {
    /// Build the world, split its flows 8:1:1, assemble the training graph,
    /// and initialize a compact model suitable for in-browser epochs.
    #[wasm_bindgen(constructor)]
    pub fn new(
        seed: u64,
        cities: usize,
        grid_side: usize,
        density: f64,
        noise: f64,
    ) -> Result<DemoSession, JsValue> {
        let world = generate_world(&world_config(seed, cities, grid_side, density, noise))
            .map_err(err_to_js)?;
        let split = split_edges(&world.flows, (0.8, 0.1, 0.1), seed).map_err(err_to_js)?;
        let standardized = world.indicators.standardize();
        let graph = build_graph(
            &standardized,
            &world.inclusion,
            &split.train_records(),
            Some(&world.coords),
            &GraphOptions::default(),
        )
        .map_err(err_to_js)?;
        let model_config = ModelConfig {
            embed_dim: 32,
            heads: 4,
            layers: 2,
            decoder_hidden: 32,
            ..ModelConfig::default()
        };
        let config = TrainConfig {
            learning_rate: 3e-3,
            seed,
            ..TrainConfig::default()
        };
        let params = init_params(
            &model_config,
            graph.n_city,
            graph.indicators.feature_count(),
            seed,
        )
        .map_err(err_to_js)?;
        let adam = Adam::new(config.learning_rate);
        Ok(DemoSession {
            world,
            graph,
            split,
            params,
            adam,
            config,
            epoch: 0,
        })
    }

    pub fn map_json(&self) -> String {
        world_json(&self.world, 400).to_string()
    }

    /// Run `n` full-batch epochs; returns `[{epoch, loss, val_rmse}, ...]`.
    pub fn train_epochs(&mut self, n: usize) -> Result<String, JsValue> {
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let row = self.one_epoch().map_err(err_to_js)?;
            rows.push(row);
        }
        Ok(serde_json::Value::Array(rows).to_string())
    }

    fn one_epoch(&mut self) -> hiurnet::Result<serde_json::Value> {
        let mut tape = Tape::new();
        let (view, order) = params_on_tape(&mut tape, &self.params, true);
        let embeddings = encode(&mut tape, &view, &self.graph)?;

        let mut total = None;
        for kind in FlowKind::ALL {
            let records = self.split.train.get(kind);
            if records.is_empty() {
                continue;
            }
            let pairs: Vec<(UnitId, UnitId)> =
                records.iter().map(|r| (r.origin, r.destination)).collect();
            let targets = Tensor::vector(records.iter().map(|r| r.volume).collect());
            let pred = decode_pairs(&mut tape, &view, &self.graph, embeddings, &pairs, kind)?;
            let target = tape.leaf(targets);
            let loss =
                focal_l2_on_tape(&mut tape, pred, target, self.config.beta, self.config.gamma);
            let weighted = tape.scale(loss, self.config.weight(kind));
            total = Some(match total {
                Some(t) => tape.add(t, weighted),
                None => weighted,
            });
        }
        let total = total.ok_or(hiurnet::Error::EmptyInput)?;
        let loss_value = tape.value(total).item();

        // Validation RMSE on this epoch's embeddings.
        let mut weighted_rmse = 0.0;
        let mut weight_sum = 0.0;
        for kind in FlowKind::ALL {
            let records = self.split.val.get(kind);
            if records.is_empty() {
                continue;
            }
            let pairs: Vec<(UnitId, UnitId)> =
                records.iter().map(|r| (r.origin, r.destination)).collect();
            let truth: Vec<f64> = records.iter().map(|r| r.volume).collect();
            let pred = decode_pairs(&mut tape, &view, &self.graph, embeddings, &pairs, kind)?;
            let rmse = hiurnet::metrics::rmse(tape.value(pred).data(), &truth)?;
            weighted_rmse += self.config.weight(kind) * rmse;
            weight_sum += self.config.weight(kind);
        }
        let val_rmse = if weight_sum > 0.0 {
            weighted_rmse / weight_sum
        } else {
            f64::NAN
        };

        tape.backward(total);
        self.adam.begin_step();
        let grads: Vec<Vec<f64>> = order
            .iter()
            .map(|v| {
                tape.grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(*v).len()])
            })
            .collect();
        let mut i = 0usize;
        self.params.for_each_mut(&mut |t| {
            self.adam.update(i, t.data_mut(), &grads[i]);
            i += 1;
        });

        let row = json!({ "epoch": self.epoch, "loss": loss_value, "val_rmse": val_rmse });
        self.epoch += 1;
        Ok(row)
    }

    /// Held-out metrics per task: `{task: {rmse, mae, pcc, n}}`.
    pub fn test_metrics(&self) -> Result<String, JsValue> {
        let records: Vec<_> = FlowKind::ALL
            .iter()
            .flat_map(|k| self.split.test.get(*k).clone())
            .collect();
        let report =
            evaluate_model(&self.params, &self.graph, &records, false).map_err(err_to_js)?;
        let mut out = serde_json::Map::new();
        for (kind, m) in report.iter() {
            let value = match m {
                Some(m) => json!({ "rmse": m.rmse, "mae": m.mae, "pcc": m.pcc, "n": m.n }),
                None => serde_json::Value::Null,
            };
            out.insert(kind.as_str().to_string(), value);
        }
        Ok(serde_json::Value::Object(out).to_string())
    }

    /// Truth/prediction pairs for a scatter plot of one task on the test set.
    pub fn prediction_scatter(&self, task: &str, max_points: usize) -> Result<String, JsValue> {
        let kind = match task {
            "C2M" => FlowKind::C2M,
            "M2C" => FlowKind::M2C,
            _ => FlowKind::M2M,
        };
        let records = self.split.test.get(kind);
        let pairs: Vec<(UnitId, UnitId)> =
            records.iter().map(|r| (r.origin, r.destination)).collect();
        let pred = hiurnet::train::predict(&self.params, &self.graph, &pairs, kind, false)
            .map_err(err_to_js)?;
        let points: Vec<serde_json::Value> = records
            .iter()
            .zip(&pred)
            .take(max_points)
            .map(|(r, p)| json!([r.volume, p]))
            .collect();
        Ok(serde_json::Value::Array(points).to_string())
    }

    pub fn city_count(&self) -> usize {
        self.graph.n_city
    }

    pub fn epochs_run(&self) -> usize {
        self.epoch
    }

    /// Integrated-gradients summary for one city: ranked member grids with
    /// coordinates plus the normalized category rollup.
    pub fn explain_city(&self, city: usize, k: usize, steps: usize) -> Result<String, JsValue> {
        let request = AttributionRequest {
            k: k.max(1),
            steps: steps.max(2),
            ..AttributionRequest::new(UnitId::city(city))
        };
        let report = regional_summary(&self.params, &self.graph, &self.split, &request, 1)
            .map_err(err_to_js)?;
        let grids: Vec<serde_json::Value> = report
            .grid_ranking
            .iter()
            .map(|&(g, mass)| {
                let c = self.world.coords[g];
                json!({ "grid": g, "x": c[0], "y": c[1], "attribution": mass })
            })
            .collect();
        let rollup: Vec<serde_json::Value> = report
            .normalized_rollup()
            .iter()
            .map(|(cat, v)| json!({ "category": cat.as_str(), "value": v }))
            .collect();
        let payload = json!({
            "city": city,
            "target_edges": report.target_edges.len(),
            "completeness_gaps": report.completeness_gaps,
            "grids": grids,
            "rollup": rollup,
        });
        Ok(payload.to_string())
    }
}
