//! Minibatch training, evaluation and per-sampler benchmarking.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::estimator::{full_forward, sampled_forward, ForwardOptions, GraphInputs, ModelParams, ParamVars};
use crate::graph::{normalize, RawDataset, Splits};
use crate::sampler::{attention_graph, build_network_plan, SamplingInputs, Strategy};
use crate::tensor::{AdamState, DenseMatrix, SparseMatrix, Tape};
use crate::variance::{hybrid_loss, variance_penalty, HybridLossReport};

/// Header of the metrics file, one row per [`EpochRecord`].
pub const METRICS_HEADER: &str = "epoch,loss_c,loss_var,loss_total,val_acc,test_acc,seconds,nodes_sampled";

/// Scales every non-zero feature row to unit sum.
pub fn row_normalize(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let s: f64 = row.iter().sum();
        if s != 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    out
}

/// A dataset turned into the inputs training needs.
#[derive(Debug)]
pub struct TrainingData {
    /// Propagation operator (`Â`, or `Â + Â²` for two-hop runs) and features.
    pub inputs: GraphInputs,
    pub labels: Vec<Option<usize>>,
    pub splits: Splits,
    pub num_classes: usize,
}

impl TrainingData {
    pub fn prepare(raw: &RawDataset, config: &TrainConfig) -> Result<Self> {
        raw.validate()?;
        if raw.splits.train.is_empty() {
            return Err(Error::Validation("the training split is empty".into()));
        }
        let mut graph = normalize(raw);
        if config.two_hop {
            graph = graph.two_hop(config.two_hop_max_nodes)?;
        }
        let features = if config.normalize_features {
            row_normalize(&raw.features)
        } else {
            raw.features.clone()
        };
        Ok(Self {
            inputs: GraphInputs::new(graph, SparseMatrix::from_dense(&features))?,
            labels: raw.labels.clone(),
            splits: raw.splits.clone(),
            num_classes: raw.num_classes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.inputs.num_nodes()
    }

    pub fn labels_of(&self, idx: &[usize]) -> Result<Vec<usize>> {
        idx.iter()
            .map(|&i| {
                self.labels
                    .get(i)
                    .copied()
                    .flatten()
                    .ok_or_else(|| Error::Input(format!("node {i} has no label")))
            })
            .collect()
    }
}

/// Metrics of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_c: f64,
    pub loss_var: f64,
    pub loss_total: f64,
    pub val_acc: f64,
    /// `NaN` when the test split is empty.
    pub test_acc: f64,
    pub seconds: f64,
    /// Sampled node slots summed over the epoch's minibatches.
    pub nodes_sampled: usize,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss_c,
            self.loss_var,
            self.loss_total,
            self.val_acc,
            self.test_acc,
            self.seconds,
            self.nodes_sampled
        )
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation accuracy (the initial ones when no epoch ran).
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Node slots per layer of the first minibatch, top first.
    pub first_batch_sizes: Vec<usize>,
}

/// Fraction of `idx` whose argmax logit matches the label.
pub fn accuracy(logits: &DenseMatrix, labels: &[Option<usize>], idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::Input("accuracy over an empty index set".into()));
    }
    let pred = logits.argmax_rows();
    let mut correct = 0;
    for &i in idx {
        let y = labels
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Input(format!("node {i} has no label")))?;
        if pred.get(i).copied() == Some(y) {
            correct += 1;
        }
    }
    Ok(correct as f64 / idx.len() as f64)
}

/// Accuracy of the exact forward pass over `idx`.
pub fn evaluate(
    params: &ModelParams,
    inputs: &GraphInputs,
    options: &ForwardOptions,
    labels: &[Option<usize>],
    idx: &[usize],
) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::Input("evaluation over an empty index set".into()));
    }
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let logits = full_forward(&mut tape, inputs, params, &vars, options)?;
    accuracy(tape.value(logits), labels, idx)
}

/// Which sampler parameters receive updates.
#[derive(Debug, Clone, Copy)]
struct Trainable {
    w_g: bool,
    attention: bool,
}

impl Trainable {
    fn of(config: &TrainConfig) -> Self {
        let adaptive = config.sampler == Strategy::Adaptive;
        Self {
            w_g: config.attention
                || (adaptive
                    && (config.resolved_lambda() > 0.0 || config.q_gradient == crate::estimator::QGradient::Pathwise)),
            attention: config.attention,
        }
    }
}

#[derive(Default)]
struct Totals {
    loss_c: f64,
    loss_var: f64,
    loss_total: f64,
    batches: usize,
    slots: usize,
}

impl Totals {
    fn add(&mut self, r: &HybridLossReport, slots: usize) {
        self.loss_c += r.classification;
        self.loss_var += r.variance;
        self.loss_total += r.total;
        self.batches += 1;
        self.slots += slots;
    }
}

fn numeric_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric { context, detail } => Error::Numeric {
            context: format!("epoch {epoch}, batch {batch}, {context}"),
            detail,
        },
        other => other,
    }
}

/// One optimisation step on a minibatch; returns the loss terms and slot count.
fn train_step(
    config: &TrainConfig,
    data: &TrainingData,
    params: &mut ModelParams,
    adam: &mut AdamState,
    trainable: Trainable,
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(HybridLossReport, Vec<usize>)> {
    let n = data.num_nodes();
    let options = config.forward_options(n);
    let attention_graph_storage;
    let graph = match options.attention {
        Some(divisor) => {
            let scores = params.sampler.scores(&data.inputs.features)?;
            attention_graph_storage = attention_graph(&data.inputs.graph, &scores, &params.sampler, divisor)?.0;
            &attention_graph_storage
        }
        None => &data.inputs.graph,
    };
    let sampling = SamplingInputs {
        graph,
        features: &data.inputs.features,
        params: &params.sampler,
        node_wise_mode: config.node_wise_mode,
    };
    let plan = build_network_plan(sampling, batch, &config.sample_sizes(n), config.sampler, rng)?;

    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let act = sampled_forward(&mut tape, &plan, &data.inputs, params, &vars, &options)?;
    let labels = data.labels_of(batch)?;

    let lambda = config.resolved_lambda();
    let penalty = if lambda > 0.0 && config.sampler != Strategy::Full {
        let hidden = match act.hidden.first().copied() {
            Some(h) if !config.penalty_through_hidden => Some(tape.constant(tape.value(h).clone())),
            h => h,
        };
        let top = variance_penalty(
            &mut tape,
            &plan.layers[0],
            hidden,
            &data.inputs,
            act.slot_q[0],
            config.norm,
        )?;
        let depth = plan.depth();
        if config.penalize_first_layer && depth > 1 {
            let bottom = variance_penalty(
                &mut tape,
                &plan.layers[depth - 1],
                None,
                &data.inputs,
                act.slot_q[depth - 1],
                config.norm,
            )?;
            Some(tape.add(top, bottom)?)
        } else {
            Some(top)
        }
    } else {
        None
    };
    let (total, report) = hybrid_loss(&mut tape, act.logits, &labels, penalty, lambda)?;
    let grads = tape.backward(total)?;

    let filter_grads: Vec<DenseMatrix> = vars
        .filters
        .iter()
        .zip(&params.gcn.filters)
        .map(|(&v, w)| grads.get_or_zeros(v, w))
        .collect();
    let w_g_grad = grads.get_or_zeros(vars.w_g, &params.sampler.w_g);
    let w1_grad = grads.get_or_zeros(vars.w1, &DenseMatrix::scalar(0.0));
    let w2_grad = grads.get_or_zeros(vars.w2, &DenseMatrix::scalar(0.0));

    let mut w1 = DenseMatrix::scalar(params.sampler.w1);
    let mut w2 = DenseMatrix::scalar(params.sampler.w2);
    {
        let mut targets: Vec<&mut DenseMatrix> = params.gcn.filters.iter_mut().collect();
        let mut g: Vec<&DenseMatrix> = filter_grads.iter().collect();
        if trainable.w_g {
            targets.push(&mut params.sampler.w_g);
            g.push(&w_g_grad);
        }
        if trainable.attention {
            targets.push(&mut w1);
            g.push(&w1_grad);
            targets.push(&mut w2);
            g.push(&w2_grad);
        }
        adam.step(&mut targets, &g)?;
    }
    params.sampler.w1 = w1.item();
    params.sampler.w2 = w2.item();
    let all_finite = params.gcn.filters.iter().all(DenseMatrix::is_finite)
        && params.sampler.w_g.is_finite()
        && params.sampler.w1.is_finite()
        && params.sampler.w2.is_finite();
    if !all_finite {
        return Err(Error::Numeric {
            context: "parameter update".into(),
            detail: "non-finite parameters after the optimiser step".into(),
        });
    }
    Ok((report, plan.layer_sizes()))
}

/// Trains with the configured sampler and keeps the best-validation parameters.
///
/// `on_epoch` sees every record as soon as it is complete, so callers can
/// persist progress even when a later epoch diverges.
pub fn train(
    config: &TrainConfig,
    data: &TrainingData,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.splits.val.is_empty() {
        return Err(Error::Validation("the validation split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(data.inputs.feature_dim(), &config.hidden, data.num_classes, &mut rng)?;
    let mut adam = AdamState::new(config.learning_rate, config.weight_decay);
    let trainable = Trainable::of(config);
    let options = config.forward_options(data.num_nodes());

    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_val = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut first_batch_sizes = Vec::new();
    let mut order = data.splits.train.clone();

    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut totals = Totals::default();
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let (report, sizes) = train_step(config, data, &mut params, &mut adam, trainable, batch, &mut rng)
                .map_err(|e| numeric_context(e, epoch, b))?;
            if first_batch_sizes.is_empty() {
                first_batch_sizes = sizes.clone();
            }
            totals.add(&report, sizes.iter().sum());
        }

        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &params);
        let logits = full_forward(&mut tape, &data.inputs, &params, &vars, &options)
            .map_err(|e| numeric_context(e, epoch, totals.batches))?;
        let logits = tape.value(logits);
        let val_acc = accuracy(logits, &data.labels, &data.splits.val)?;
        let test_acc = if data.splits.test.is_empty() {
            f64::NAN
        } else {
            accuracy(logits, &data.labels, &data.splits.test)?
        };
        let batches = totals.batches as f64;
        let record = EpochRecord {
            epoch,
            loss_c: totals.loss_c / batches,
            loss_var: totals.loss_var / batches,
            loss_total: totals.loss_total / batches,
            val_acc,
            test_acc,
            seconds: if config.deterministic {
                0.0
            } else {
                start.elapsed().as_secs_f64()
            },
            nodes_sampled: totals.slots,
        };
        on_epoch(&record)?;
        history.push(record);

        if val_acc > best_val {
            best_val = val_acc;
            best_epoch = epoch;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if config.early_stop_window > 0 && since_best >= config.early_stop_window {
                log::info!("early stop at epoch {epoch}; best validation accuracy {best_val} at epoch {best_epoch}");
                break;
            }
        }
    }

    if history.is_empty() {
        best = params;
        best_val = f64::NAN;
    }
    Ok(TrainOutcome {
        params: best,
        history,
        best_epoch,
        best_val_acc: best_val,
        first_batch_sizes,
    })
}

/// One row of the benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub sampler: Strategy,
    pub epochs: usize,
    pub mean_epoch_seconds: f64,
    /// Node slots per layer of a full minibatch, top first.
    pub nodes_per_batch: Vec<usize>,
    pub slots_per_batch: usize,
    pub final_val_acc: f64,
    pub final_test_acc: f64,
}

/// Header of the benchmark CSV.
pub const BENCH_HEADER: &str =
    "sampler,epochs,mean_epoch_seconds,nodes_per_batch,slots_per_batch,final_val_acc,final_test_acc";

impl BenchRow {
    pub fn csv_row(&self) -> String {
        let layers: Vec<String> = self.nodes_per_batch.iter().map(ToString::to_string).collect();
        format!(
            "{},{},{},{},{},{},{}",
            self.sampler,
            self.epochs,
            self.mean_epoch_seconds,
            layers.join("+"),
            self.slots_per_batch,
            self.final_val_acc,
            self.final_test_acc
        )
    }
}

/// Runs each sampler for a fixed number of epochs without early stopping.
///
/// Fails when a layer-wise sampler touches at least as many node slots per
/// minibatch as the node-wise sampler.
pub fn benchmark(
    base: &TrainConfig,
    data: &TrainingData,
    samplers: &[Strategy],
    epochs: usize,
) -> Result<Vec<BenchRow>> {
    if epochs == 0 {
        return Err(Error::Config("benchmark needs at least one epoch".into()));
    }
    let mut rows = Vec::with_capacity(samplers.len());
    for &sampler in samplers {
        let config = TrainConfig {
            sampler,
            max_epochs: epochs,
            early_stop_window: 0,
            ..base.clone()
        };
        let outcome = train(&config, data, &mut |_| Ok(()))?;
        let last = outcome.history.last().expect("at least one epoch");
        let seconds = outcome.history.iter().map(|r| r.seconds).sum::<f64>() / outcome.history.len() as f64;
        rows.push(BenchRow {
            sampler,
            epochs,
            mean_epoch_seconds: seconds,
            slots_per_batch: outcome.first_batch_sizes.iter().sum(),
            nodes_per_batch: outcome.first_batch_sizes,
            final_val_acc: last.val_acc,
            final_test_acc: last.test_acc,
        });
    }
    if let Some(nw) = rows.iter().find(|r| r.sampler == Strategy::NodeWise) {
        for r in rows.iter().filter(|r| r.sampler.is_layer_wise()) {
            if r.slots_per_batch >= nw.slots_per_batch {
                return Err(Error::Numeric {
                    context: "benchmark".into(),
                    detail: format!(
                        "{} touches {} slots per batch, node_wise {}",
                        r.sampler, r.slots_per_batch, nw.slots_per_batch
                    ),
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SyntheticSpec;

    fn small() -> RawDataset {
        SyntheticSpec::default().generate().unwrap()
    }

    fn quick(sampler: Strategy) -> TrainConfig {
        TrainConfig {
            sampler,
            layer_size: Some(32),
            batch_size: 64,
            max_epochs: 3,
            learning_rate: 0.01,
            deterministic: true,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let raw = small();
        let config = TrainConfig {
            max_epochs: 0,
            ..quick(Strategy::Adaptive)
        };
        let data = TrainingData::prepare(&raw, &config).unwrap();
        let out = train(&config, &data, &mut |_| Ok(())).unwrap();
        assert!(out.history.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let init = ModelParams::init(raw.feature_dim(), &config.hidden, raw.num_classes, &mut rng).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn deterministic_runs_repeat() {
        let raw = small();
        for s in Strategy::ALL {
            let config = quick(s);
            let data = TrainingData::prepare(&raw, &config).unwrap();
            let a = train(&config, &data, &mut |_| Ok(())).unwrap();
            let b = train(&config, &data, &mut |_| Ok(())).unwrap();
            assert_eq!(a.history, b.history, "{s}");
            assert_eq!(a.history.len(), 3);
        }
    }

    #[test]
    fn penalty_without_trainable_inputs_changes_nothing() {
        let raw = small();
        let plain = quick(Strategy::Iid);
        let penalised = TrainConfig {
            lambda: Some(0.5),
            penalty_through_hidden: false,
            ..plain.clone()
        };
        let data = TrainingData::prepare(&raw, &plain).unwrap();
        let a = train(&plain, &data, &mut |_| Ok(())).unwrap();
        let b = train(&penalised, &data, &mut |_| Ok(())).unwrap();
        assert_eq!(a.params, b.params);
        assert!(b.history.iter().all(|r| r.loss_var > 0.0));
    }

    #[test]
    fn empty_index_set_is_error() {
        let raw = small();
        let config = quick(Strategy::Full);
        let data = TrainingData::prepare(&raw, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = ModelParams::init(raw.feature_dim(), &[4], raw.num_classes, &mut rng).unwrap();
        assert!(evaluate(&params, &data.inputs, &ForwardOptions::default(), &data.labels, &[]).is_err());
    }

    #[test]
    fn metrics_row_shape() {
        let r = EpochRecord {
            epoch: 1,
            loss_c: 0.5,
            loss_var: 0.0,
            loss_total: 0.5,
            val_acc: 0.25,
            test_acc: 0.75,
            seconds: 0.0,
            nodes_sampled: 512,
        };
        assert_eq!(r.csv_row().split(',').count(), METRICS_HEADER.split(',').count());
    }
}
