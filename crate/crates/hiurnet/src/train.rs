//! Multi-task training: per-task focal L2 losses, a weighted total, full-batch
//! Adam updates, and early stopping on the weighted validation RMSE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeSplit, FlowKind, FlowRecord, HeteroGraph, PerTask, UnitId};
use crate::io::HistoryRow;
use crate::metrics::{self, MetricsReport};
use crate::model::{decode_pairs, encode, params_on_tape, ModelConfig, ModelParams};
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weights for the [C2M, M2C, M2M] tasks, in that order.
    pub task_weights: [f64; 3],
    pub beta: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Train and predict on log1p-transformed volumes instead of raw ones.
    pub log1p_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task_weights: [0.1, 0.1, 0.8],
            beta: 0.2,
            gamma: 1.0,
            learning_rate: 1e-3,
            max_epochs: 500,
            patience: 20,
            seed: 0,
            log1p_targets: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.task_weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidConfig("task weights must be >= 0".into()));
        }
        if self.beta <= 0.0 {
            return Err(Error::InvalidConfig("beta must be > 0".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::InvalidConfig("gamma must be >= 0".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning rate must be > 0".into()));
        }
        Ok(())
    }

    pub fn weight(&self, kind: FlowKind) -> f64 {
        match kind {
            FlowKind::C2M => self.task_weights[0],
            FlowKind::M2C => self.task_weights[1],
            FlowKind::M2M => self.task_weights[2],
        }
    }
}

/// Focal L2 loss: `(1/n) sum (2 sigmoid(|beta e|) - 1)^gamma e^2` with
/// `e = prediction - target`.
pub fn focal_l2(predictions: &[f64], targets: &[f64], beta: f64, gamma: f64) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::LengthMismatch(predictions.len(), targets.len()));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput);
    }
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let e = p - t;
            (2.0 * sigmoid((beta * e).abs()) - 1.0).powf(gamma) * e * e
        })
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// Tape expression of the focal L2 loss over prediction and target vectors.
pub fn focal_l2_on_tape(tape: &mut Tape, pred: Var, target: Var, beta: f64, gamma: f64) -> Var {
    let err = tape.sub(pred, target);
    let abs_err = tape.abs(err);
    let scaled = tape.scale(abs_err, beta);
    let sig = tape.sigmoid(scaled);
    let doubled = tape.scale(sig, 2.0);
    let focal = tape.add_scalar(doubled, -1.0);
    let modulator = tape.pow_scalar(focal, gamma);
    let square = tape.mul(err, err);
    let weighted = tape.mul(modulator, square);
    tape.mean(weighted)
}

/// Weighted sum of the per-task losses.
pub fn multitask_loss(task_losses: [f64; 3], weights: [f64; 3]) -> Result<f64> {
    if weights.iter().any(|w| *w < 0.0) {
        return Err(Error::InvalidConfig("task weights must be >= 0".into()));
    }
    Ok(task_losses.iter().zip(&weights).map(|(l, w)| l * w).sum())
}

/// Adam with per-tensor first/second moment state, indexed positionally.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, index: usize, param: &mut [f64], grad: &[f64]) {
        while self.m.len() <= index {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        if self.m[index].len() != param.len() {
            self.m[index] = vec![0.0; param.len()];
            self.v[index] = vec![0.0; param.len()];
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in param
            .iter_mut()
            .zip(grad)
            .zip(self.m[index].iter_mut().zip(self.v[index].iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
    pub best_epoch: usize,
}

struct TaskBatch {
    pairs: Vec<(UnitId, UnitId)>,
    targets: Tensor,
    truth_raw: Vec<f64>,
}

fn batch_of(records: &[FlowRecord], log1p: bool) -> Option<TaskBatch> {
    if records.is_empty() {
        return None;
    }
    let pairs = records.iter().map(|r| (r.origin, r.destination)).collect();
    let truth_raw: Vec<f64> = records.iter().map(|r| r.volume).collect();
    let targets = Tensor::vector(
        truth_raw
            .iter()
            .map(|v| if log1p { v.ln_1p() } else { *v })
            .collect(),
    );
    Some(TaskBatch {
        pairs,
        targets,
        truth_raw,
    })
}

/// Full-batch multi-task training on a graph whose flow edges come from the
/// training split only. Returns the parameters of the best validation epoch.
pub fn train(
    graph: &HeteroGraph,
    split: &EdgeSplit,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    mut on_epoch: impl FnMut(&HistoryRow),
) -> Result<(ModelParams<Tensor>, TrainHistory)> {
    model_config.validate()?;
    train_config.validate()?;

    let mut params = crate::model::init_params(
        model_config,
        graph.n_city,
        graph.indicators.feature_count(),
        train_config.seed,
    )?;
    let mut adam = Adam::new(train_config.learning_rate);

    let train_batches: PerTask<Option<TaskBatch>> = split
        .train
        .map(|_, records| batch_of(records, train_config.log1p_targets));
    let val_batches: PerTask<Option<TaskBatch>> = split
        .val
        .map(|_, records| batch_of(records, train_config.log1p_targets));

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams<Tensor>)> = None;
    let mut stale_epochs = 0usize;

    for epoch in 0..train_config.max_epochs {
        let mut tape = Tape::new();
        let (view, order) = params_on_tape(&mut tape, &params, true);
        let embeddings = encode(&mut tape, &view, graph)?;

        let mut task_losses = PerTask::<f64>::default();
        let mut total: Option<Var> = None;
        for kind in FlowKind::ALL {
            let Some(batch) = train_batches.get(kind) else {
                continue;
            };
            let pred = decode_pairs(&mut tape, &view, graph, embeddings, &batch.pairs, kind)?;
            let target = tape.leaf(batch.targets.clone());
            let loss = focal_l2_on_tape(
                &mut tape,
                pred,
                target,
                train_config.beta,
                train_config.gamma,
            );
            *task_losses.get_mut(kind) = tape.value(loss).item();
            let weighted = tape.scale(loss, train_config.weight(kind));
            total = Some(match total {
                Some(t) => tape.add(t, weighted),
                None => weighted,
            });
        }
        let total = total.ok_or(Error::EmptyInput)?;
        let loss_total = tape.value(total).item();
        if !loss_total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: loss_total,
            });
        }

        // Validation predictions reuse this epoch's embeddings (the encoder
        // only ever sees training-split flow edges).
        let mut val_rmse = PerTask::<f64>::default();
        let mut weighted_sum = 0.0;
        let mut weight_total = 0.0;
        for kind in FlowKind::ALL {
            let Some(batch) = val_batches.get(kind) else {
                continue;
            };
            let pred = decode_pairs(&mut tape, &view, graph, embeddings, &batch.pairs, kind)?;
            let values = predicted_volumes(tape.value(pred).data(), train_config.log1p_targets);
            let rmse = metrics::rmse(&values, &batch.truth_raw)?;
            *val_rmse.get_mut(kind) = rmse;
            weighted_sum += train_config.weight(kind) * rmse;
            weight_total += train_config.weight(kind);
        }
        let val_weighted = if weight_total > 0.0 {
            weighted_sum / weight_total
        } else {
            f64::INFINITY
        };

        // Snapshot before stepping: these are the parameters the validation
        // metric was measured on.
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_weighted < *b);
        if improved {
            best = Some((val_weighted, epoch, params.clone()));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
        }

        tape.backward(total);
        adam.begin_step();
        let mut index = 0usize;
        let mut grad_buffer: Vec<Vec<f64>> = Vec::with_capacity(order.len());
        for var in &order {
            grad_buffer.push(
                tape.grad(*var)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(*var).len()]),
            );
        }
        params.for_each_mut(&mut |t| {
            adam.update(index, t.data_mut(), &grad_buffer[index]);
            index += 1;
        });

        let mut finite = true;
        params.for_each(&mut |_, t| finite &= t.all_finite());
        if !finite {
            return Err(Error::Diverged {
                epoch,
                loss: loss_total,
            });
        }

        let row = HistoryRow {
            epoch,
            loss_total,
            task_losses: task_losses.clone(),
            val_rmse: val_rmse.clone(),
            val_rmse_weighted: val_weighted,
        };
        on_epoch(&row);
        history.push(row);

        if !improved && stale_epochs >= train_config.patience {
            break;
        }
    }

    let (_, best_epoch, best_params) = best.ok_or(Error::EmptyInput)?;
    Ok((
        best_params,
        TrainHistory {
            rows: history,
            best_epoch,
        },
    ))
}

fn predicted_volumes(raw: &[f64], log1p: bool) -> Vec<f64> {
    if log1p {
        raw.iter().map(|v| v.exp_m1().max(0.0)).collect()
    } else {
        raw.to_vec()
    }
}

/// Predict volumes for arbitrary pairs of one task with frozen parameters.
pub fn predict(
    params: &ModelParams<Tensor>,
    graph: &HeteroGraph,
    pairs: &[(UnitId, UnitId)],
    task: FlowKind,
    log1p: bool,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let (view, _) = params_on_tape(&mut tape, params, false);
    let embeddings = encode(&mut tape, &view, graph)?;
    let pred = decode_pairs(&mut tape, &view, graph, embeddings, pairs, task)?;
    Ok(predicted_volumes(tape.value(pred).data(), log1p))
}

/// Per-task metrics on raw volumes; a task with no records is reported absent.
pub fn evaluate_model(
    params: &ModelParams<Tensor>,
    graph: &HeteroGraph,
    records: &[FlowRecord],
    log1p: bool,
) -> Result<PerTask<Option<MetricsReport>>> {
    let mut tape = Tape::new();
    let (view, _) = params_on_tape(&mut tape, params, false);
    let embeddings = encode(&mut tape, &view, graph)?;
    let mut out = PerTask::<Option<MetricsReport>>::default();
    for kind in FlowKind::ALL {
        let group: Vec<&FlowRecord> = records.iter().filter(|r| r.kind() == kind).collect();
        if group.is_empty() {
            continue;
        }
        let pairs: Vec<(UnitId, UnitId)> =
            group.iter().map(|r| (r.origin, r.destination)).collect();
        let truth: Vec<f64> = group.iter().map(|r| r.volume).collect();
        let pred_var = decode_pairs(&mut tape, &view, graph, embeddings, &pairs, kind)?;
        let pred = predicted_volumes(tape.value(pred_var).data(), log1p);
        *out.get_mut(kind) = Some(metrics::report(&pred, &truth)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn focal_l2_zero_when_exact() {
        assert_eq!(focal_l2(&[1.0, 2.0], &[1.0, 2.0], 0.2, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn focal_l2_hand_value() {
        // e = 1, beta = 0.2, gamma = 1: (2 sigmoid(0.2) - 1) * 1
        let expect = 2.0 / (1.0 + (-0.2f64).exp()) - 1.0;
        let got = focal_l2(&[1.0], &[0.0], 0.2, 1.0).unwrap();
        assert!((got - expect).abs() < 1e-15);
        assert!((got - 0.099668).abs() < 1e-6);
    }

    #[test]
    fn focal_l2_symmetric_in_error_sign() {
        let plus = focal_l2(&[1.0], &[0.0], 0.2, 1.0).unwrap();
        let minus = focal_l2(&[-1.0], &[0.0], 0.2, 1.0).unwrap();
        assert_eq!(plus, minus);
    }

    #[test]
    fn focal_l2_rejects_bad_lengths() {
        assert!(focal_l2(&[1.0], &[1.0, 2.0], 0.2, 1.0).is_err());
        assert!(focal_l2(&[], &[], 0.2, 1.0).is_err());
    }

    #[test]
    fn focal_tape_matches_plain() {
        let pred = [3.0, -1.5, 0.25, 8.0];
        let tgt = [1.0, -1.0, 0.25, 2.5];
        for (beta, gamma) in [(0.2, 1.0), (0.5, 2.0), (1.0, 0.5)] {
            let plain = focal_l2(&pred, &tgt, beta, gamma).unwrap();
            let mut tape = Tape::new();
            let p = tape.leaf(Tensor::vector(pred.to_vec()));
            let t = tape.leaf(Tensor::vector(tgt.to_vec()));
            let loss = focal_l2_on_tape(&mut tape, p, t, beta, gamma);
            assert!((tape.value(loss).item() - plain).abs() < 1e-14);
        }
    }

    #[test]
    fn multitask_hand_values() {
        assert_eq!(
            multitask_loss([1.0, 1.0, 1.0], [0.1, 0.1, 0.8]).unwrap(),
            1.0
        );
        assert_eq!(
            multitask_loss([5.0, 7.0, 3.0], [0.0, 0.0, 1.0]).unwrap(),
            3.0
        );
        let got = multitask_loss([2.0, 4.0, 1.0], [0.1, 0.1, 0.8]).unwrap();
        assert!((got - 1.4).abs() < 1e-15);
        assert!(multitask_loss([1.0, 1.0, 1.0], [-0.1, 0.5, 0.6]).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut adam = Adam::new(1e-3);
        adam.begin_step();
        let mut param = vec![1.0, -2.0, 0.5];
        let before = param.clone();
        adam.update(0, &mut param, &[0.0, 0.0, 0.0]);
        assert_eq!(param, before);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut adam = Adam::new(0.1);
        adam.begin_step();
        let mut param = vec![1.0];
        adam.update(0, &mut param, &[2.0]);
        assert!(param[0] < 1.0);
    }

    use crate::graph::{build_graph, split_edges, GraphOptions};
    use crate::synth::{generate_world, WorldConfig};

    fn small_training_setup(seed: u64) -> (crate::graph::HeteroGraph, crate::graph::EdgeSplit) {
        let world = generate_world(&WorldConfig {
            n_cities: 3,
            grid_side: 3,
            flow_density: 0.15,
            seed,
            ..WorldConfig::default()
        })
        .unwrap();
        let split = split_edges(&world.flows, (0.8, 0.1, 0.1), seed).unwrap();
        let standardized = world.indicators.standardize();
        let graph = build_graph(
            &standardized,
            &world.inclusion,
            &split.train_records(),
            Some(&world.coords),
            &GraphOptions::default(),
        )
        .unwrap();
        (graph, split)
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            heads: 2,
            layers: 1,
            decoder_hidden: 8,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_history() {
        let (graph, split) = small_training_setup(6);
        let config = TrainConfig {
            max_epochs: 5,
            seed: 6,
            ..TrainConfig::default()
        };
        let (params_a, history_a) = train(&graph, &split, &small_model(), &config, |_| {}).unwrap();
        let (params_b, history_b) = train(&graph, &split, &small_model(), &config, |_| {}).unwrap();
        assert_eq!(history_a.rows, history_b.rows);
        assert_eq!(params_a, params_b);
    }

    #[test]
    fn training_loss_drops_over_thirty_epochs() {
        let (graph, split) = small_training_setup(9);
        let config = TrainConfig {
            max_epochs: 31,
            patience: 100,
            learning_rate: 3e-3,
            seed: 9,
            ..TrainConfig::default()
        };
        let (_, history) = train(&graph, &split, &small_model(), &config, |_| {}).unwrap();
        assert!(history.rows.len() == 31);
        let first = history.rows[0].loss_total;
        let thirtieth = history.rows[30].loss_total;
        assert!(thirtieth < first, "loss {first} -> {thirtieth}");
    }

    #[test]
    fn zero_weight_tasks_get_exactly_zero_decoder_gradients() {
        let (graph, split) = small_training_setup(4);
        let config = TrainConfig {
            task_weights: [0.0, 0.0, 1.0],
            ..TrainConfig::default()
        };
        let params = crate::model::init_params(
            &small_model(),
            graph.n_city,
            graph.indicators.feature_count(),
            4,
        )
        .unwrap();

        let mut tape = Tape::new();
        let mut named: Vec<(String, Var)> = Vec::new();
        let view = params.map(&mut |name, t: &crate::tensor::Tensor| {
            let v = tape.param(t.clone());
            named.push((name.to_string(), v));
            v
        });
        let embeddings = crate::model::encode(&mut tape, &view, &graph).unwrap();
        let mut total: Option<Var> = None;
        for kind in FlowKind::ALL {
            let records = split.train.get(kind);
            if records.is_empty() {
                continue;
            }
            let pairs: Vec<(UnitId, UnitId)> =
                records.iter().map(|r| (r.origin, r.destination)).collect();
            let targets = Tensor::vector(records.iter().map(|r| r.volume).collect());
            let pred =
                crate::model::decode_pairs(&mut tape, &view, &graph, embeddings, &pairs, kind)
                    .unwrap();
            let target = tape.leaf(targets);
            let loss = focal_l2_on_tape(&mut tape, pred, target, config.beta, config.gamma);
            let weighted = tape.scale(loss, config.weight(kind));
            total = Some(match total {
                Some(t) => tape.add(t, weighted),
                None => weighted,
            });
        }
        tape.backward(total.unwrap());

        let mut checked = 0;
        for (name, var) in &named {
            if name.starts_with("decoder.C2M") || name.starts_with("decoder.M2C") {
                let grad = tape.grad(*var).expect("decoder gradients allocated");
                assert!(
                    grad.iter().all(|g| *g == 0.0),
                    "{name} has nonzero gradient"
                );
                checked += 1;
            }
            if name.starts_with("decoder.M2M") {
                let grad = tape.grad(*var).expect("m2m decoder gradient");
                assert!(
                    grad.iter().any(|g| *g != 0.0),
                    "{name} should receive gradient"
                );
            }
        }
        assert_eq!(checked, 8);
    }

    #[test]
    fn early_stopping_returns_best_epoch_parameters() {
        let (graph, split) = small_training_setup(2);
        let config = TrainConfig {
            max_epochs: 40,
            patience: 6,
            learning_rate: 5e-3,
            seed: 2,
            ..TrainConfig::default()
        };
        let (params, history) = train(&graph, &split, &small_model(), &config, |_| {}).unwrap();
        let best_row = &history.rows[history.best_epoch];
        assert!(
            history
                .rows
                .iter()
                .all(|r| r.val_rmse_weighted >= best_row.val_rmse_weighted),
            "best epoch must minimize the weighted validation RMSE"
        );

        // Re-evaluating the returned parameters reproduces the best epoch's
        // validation RMSE, so they are the best-epoch weights, not the last.
        let val_records: Vec<FlowRecord> = FlowKind::ALL
            .iter()
            .flat_map(|k| split.val.get(*k).clone())
            .collect();
        let report = evaluate_model(&params, &graph, &val_records, false).unwrap();
        let mut weighted = 0.0;
        let mut weight_sum = 0.0;
        for (kind, m) in report.iter() {
            if let Some(m) = m {
                weighted += config.weight(kind) * m.rmse;
                weight_sum += config.weight(kind);
            }
        }
        let recomputed = weighted / weight_sum;
        assert!(
            (recomputed - best_row.val_rmse_weighted).abs() < 1e-9,
            "returned params give val RMSE {recomputed}, best epoch recorded {}",
            best_row.val_rmse_weighted
        );
    }

    proptest! {
        #[test]
        fn focal_l2_bounded_by_mse(
            pred in proptest::collection::vec(-100.0f64..100.0, 1..40),
            beta in 0.01f64..2.0,
            gamma in 0.0f64..3.0,
        ) {
            let tgt = vec![0.0; pred.len()];
            let focal = focal_l2(&pred, &tgt, beta, gamma).unwrap();
            let mse: f64 = pred.iter().map(|e| e * e).sum::<f64>() / pred.len() as f64;
            prop_assert!(focal >= 0.0);
            prop_assert!(focal <= mse + 1e-12);
        }

        #[test]
        fn multitask_linear_in_each_loss(
            l in proptest::collection::vec(0.0f64..10.0, 3),
            scale in 0.0f64..5.0,
        ) {
            let w = [0.1, 0.1, 0.8];
            let base = multitask_loss([l[0], l[1], l[2]], w).unwrap();
            let scaled = multitask_loss([l[0] * scale, l[1], l[2]], w).unwrap();
            let expect = base + w[0] * l[0] * (scale - 1.0);
            prop_assert!((scaled - expect).abs() < 1e-9);
        }
    }
}
