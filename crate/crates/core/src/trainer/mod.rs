//! Training loop: the task loss plus `γ·Q` plus the bias drain, Adam with
//! split groups, periodic channel removal, and plateau annealing after the
//! main phase.

pub mod metrics;
pub mod sweep;

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::GraphError;
use crate::config::TrainConfig;
use crate::data::{
    eval_batches, load_cifar10, synthetic_dataset, AugmentConfig, Batch, BatchStream, DataError, Dataset,
    LoaderConfig, Prefetcher, SyntheticKind,
};
use crate::error::{Error, Result};
use crate::network::{forward_network, ForwardOptions, Mode, Network};
use crate::optim::Adam;
use crate::pruner::{find_removable, keep_one_survivor, prune, PruneReport};
use crate::size::{bias_drain, network_size, size_term, LossBreakdown, SizeMode, SizeReport};
use crate::tensor::Tensor;

pub use metrics::{read_csv, FileSink, MetricsRow, MetricsSink, NullSink, CSV_HEADER};

/// Environment variable consulted when no dataset directory is configured.
pub const DATA_ENV: &str = "SELFCOMP_DATA";

/// Loss terms that shape a training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub gamma: f64,
    pub size_mode: SizeMode,
    pub bias_drain_weight: f64,
}

impl Objective {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            gamma: cfg.gamma,
            size_mode: cfg.size_mode,
            bias_drain_weight: cfg.bias_drain_weight,
        }
    }
}

/// Gradients and diagnostics of one batch.
pub struct StepGradients {
    pub loss: LossBreakdown,
    pub grads: BTreeMap<String, Tensor<f32>>,
    pub correct: usize,
    pub pass: crate::network::ForwardPass,
}

fn argmax_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let classes = logits.dim(1);
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == l
        })
        .count()
}

/// Forward and backward pass of the full objective on one batch.
pub fn compute_gradients(net: &Network, batch: &Batch, obj: &Objective) -> Result<StepGradients> {
    let mut pass = forward_network(net, &batch.images, ForwardOptions::train())?;
    let g = &mut pass.graph;
    let task = g.softmax_cross_entropy(pass.logits, &batch.labels)?;
    let mut total = task;
    let mut size_val = 0.0;
    if obj.gamma > 0.0 {
        let q = size_term(g, &pass.params, net, obj.size_mode)?;
        let sq = g.scale(q, obj.gamma)?;
        size_val = g.value(sq).item().unwrap_or(0.0) as f64;
        total = g.add(total, sq)?;
    }
    let mut drain_val = 0.0;
    if obj.bias_drain_weight > 0.0 {
        if let Some(d) = bias_drain(g, &pass.params, net)? {
            let wd = g.scale(d, obj.bias_drain_weight)?;
            drain_val = g.value(wd).item().unwrap_or(0.0) as f64;
            total = g.add(total, wd)?;
        }
    }
    let mut grads_all = g.backward(total)?;
    let mut grads = BTreeMap::new();
    for (key, &v) in &pass.params {
        if let Some(t) = grads_all.take(v) {
            grads.insert(key.clone(), t);
        }
    }
    let task_loss = g.value(task).item().unwrap_or(f32::NAN) as f64;
    let loss = LossBreakdown {
        task_loss,
        size_term: size_val,
        bias_drain: drain_val,
        total: g.value(total).item().unwrap_or(f32::NAN) as f64,
    };
    let correct = argmax_correct(g.value(pass.logits), &batch.labels);
    Ok(StepGradients {
        loss,
        grads,
        correct,
        pass,
    })
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::Graph(GraphError::NonFinite { op }) => Error::Diverged {
            step,
            reason: format!("non-finite value in `{op}`"),
        },
        Error::Diverged { reason, .. } => Error::Diverged { step, reason },
        other => other,
    }
}

/// One optimizer step; returns the loss terms and the number of correct
/// predictions in the batch.
pub fn train_step(
    net: &mut Network,
    adam: &mut Adam,
    batch: &Batch,
    obj: &Objective,
    step: usize,
) -> Result<(LossBreakdown, usize)> {
    let sg = compute_gradients(net, batch, obj).map_err(|e| diverged(step, e))?;
    if !sg.loss.task_loss.is_finite() {
        return Err(Error::Diverged {
            step,
            reason: "task loss is not finite".into(),
        });
    }
    adam.step(net, &sg.grads).map_err(|e| diverged(step, e))?;
    net.absorb_batch_stats(&sg.pass);
    Ok((sg.loss, sg.correct))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub examples: usize,
}

/// Top-1 accuracy and mean cross-entropy with running normalization statistics.
pub fn evaluate(net: &Network, data: &Dataset, batch_size: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(DataError::Empty.into());
    }
    let mut correct = 0;
    let mut loss_sum = 0.0f64;
    for batch in eval_batches(data, batch_size) {
        let mut pass = forward_network(net, &batch.images, ForwardOptions { mode: Mode::Eval, quantize: true })?;
        let ce = pass.graph.softmax_cross_entropy(pass.logits, &batch.labels)?;
        loss_sum += pass.graph.value(ce).item().unwrap_or(f32::NAN) as f64 * batch.labels.len() as f64;
        correct += argmax_correct(pass.graph.value(pass.logits), &batch.labels);
    }
    Ok(EvalResult {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
        examples: data.len(),
    })
}

/// `(train, eval)` sets described by the configuration.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = if cfg.dataset == "cifar10" {
        let dir = cfg
            .data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_ENV).map(Into::into))
            .ok_or_else(|| {
                DataError::Invalid(format!("no CIFAR-10 directory configured (set data_dir or {DATA_ENV})"))
            })?;
        load_cifar10(&dir)?
    } else {
        let kind: SyntheticKind = cfg.dataset.parse()?;
        (
            synthetic_dataset(kind, cfg.synthetic_train_size, cfg.seed.wrapping_add(0x5eed_0001))?,
            synthetic_dataset(kind, cfg.synthetic_test_size, cfg.seed.wrapping_add(0x5eed_0002))?,
        )
    };
    let train = match cfg.train_subset {
        Some(n) => train.head(n),
        None => train,
    };
    let test = match cfg.eval_subset {
        Some(n) => test.head(n),
        None => test,
    };
    if train.is_empty() || test.is_empty() {
        return Err(DataError::Empty.into());
    }
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub step: usize,
    pub report: PruneReport,
    /// Largest zero-input response among removed channels.
    pub max_removed_magnitude: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Main phase finished and no annealing budget.
    Budget,
    AnnealBudget,
    LearningRateFloor,
    Converged,
}

pub struct TrainOutcome {
    pub net: Network,
    pub history: Vec<MetricsRow>,
    pub prune_events: Vec<PruneEvent>,
    pub final_eval: EvalResult,
    pub final_size: SizeReport,
    pub steps: usize,
    pub stop_reason: StopReason,
}

/// Learning-rate reduction on evaluation-loss plateaus.
#[derive(Debug, Clone)]
struct Annealer {
    factor: f64,
    patience: usize,
    floor: f64,
    scale: f64,
    best: f64,
    bad: usize,
    reduced: bool,
    since_reduction: VecDeque<f64>,
}

impl Annealer {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            factor: cfg.plateau.factor,
            patience: cfg.plateau.patience,
            floor: cfg.plateau.min_lr,
            scale: 1.0,
            best: f64::INFINITY,
            bad: 0,
            reduced: false,
            since_reduction: VecDeque::new(),
        }
    }

    fn observe(&mut self, loss: f64) -> Option<StopReason> {
        if loss < self.best {
            self.best = loss;
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        if self.reduced {
            self.since_reduction.push_back(loss);
            if self.since_reduction.len() > 4 {
                self.since_reduction.pop_front();
            }
            if self.since_reduction.len() == 4 {
                let reference = self.since_reduction[0];
                let best_after = self.since_reduction.iter().skip(1).cloned().fold(f64::INFINITY, f64::min);
                if reference - best_after < 1e-4 {
                    return Some(StopReason::Converged);
                }
            }
        }
        if self.bad >= self.patience {
            self.scale *= self.factor;
            self.bad = 0;
            self.reduced = true;
            self.since_reduction.clear();
            self.since_reduction.push_back(loss);
            if self.scale < self.floor {
                return Some(StopReason::LearningRateFloor);
            }
        }
        None
    }
}

fn row_for(net: &Network, cfg: &TrainConfig, adam: &Adam, step: usize) -> MetricsRow {
    let size = network_size(net, cfg.size_mode);
    MetricsRow {
        step,
        task_loss: None,
        q: size.q,
        total_bits: size.total_bits,
        live_channels: size.live_channels(),
        flops: size.flops,
        train_acc: None,
        eval_acc: None,
        step_ms: None,
        lr_w: adam.config.weights.lr,
        lr_q: adam.config.quant.lr,
    }
}

/// Train `net` on `train`, evaluating on `eval`, streaming rows to `sink`.
pub fn train(
    mut net: Network,
    train: Arc<Dataset>,
    eval: &Dataset,
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(DataError::Empty.into());
    }
    if train.classes() > net.graph.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, network has {}",
            train.classes(),
            net.graph.classes
        )));
    }
    let obj = Objective::from_config(cfg);
    let mut adam = Adam::new(cfg.adam());
    let initial = cfg.adam();
    let loader = LoaderConfig {
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        augment: if cfg.augment {
            AugmentConfig::default()
        } else {
            AugmentConfig::eval()
        },
    };
    let mut batches = Prefetcher::spawn(BatchStream::new(train, loader));
    let prune_opts = cfg.prune_options();
    let hard_last = cfg.main_steps + cfg.anneal_max_steps;

    let mut history = Vec::new();
    let mut prune_events = Vec::new();
    let mut emit = |row: MetricsRow, history: &mut Vec<MetricsRow>| -> Result<()> {
        sink.row(&row)?;
        history.push(row);
        Ok(())
    };

    let mut row = row_for(&net, cfg, &adam, 0);
    let mut last_eval = evaluate(&net, eval, cfg.eval_batch_size)?;
    row.eval_acc = Some(last_eval.accuracy);
    emit(row, &mut history)?;

    let mut annealer = Annealer::new(cfg);
    let mut stop_reason = StopReason::Budget;
    let mut step = 0;
    while step < hard_last {
        step += 1;
        let batch = batches
            .next()
            .ok_or_else(|| Error::Data(DataError::Invalid("training data stream ended".into())))?;
        let t0 = Instant::now();
        let (loss, correct) = train_step(&mut net, &mut adam, &batch, &obj, step)?;
        let elapsed = t0.elapsed();

        if step >= cfg.prune_warmup && step % cfg.prune_interval == 0 {
            let mut set = find_removable(&net, &prune_opts);
            if !set.is_empty() {
                keep_one_survivor(&net, &mut set);
                let max_mag = set.candidates.iter().map(|c| c.magnitude).fold(0.0f32, f32::max);
                let report = prune(&mut net, Some(&mut adam), &set)?;
                if report.total_channels_removed() > 0 {
                    prune_events.push(PruneEvent {
                        step,
                        report,
                        max_removed_magnitude: max_mag,
                    });
                }
            }
        }

        let annealing = step > cfg.main_steps;
        let mut row = row_for(&net, cfg, &adam, step);
        row.task_loss = Some(loss.task_loss);
        row.train_acc = Some(correct as f64 / batch.labels.len() as f64);
        if cfg.record_step_time {
            row.step_ms = Some(elapsed.as_secs_f64() * 1e3);
        }
        let mut stop = None;
        if step % cfg.eval_interval == 0 || step == hard_last {
            last_eval = evaluate(&net, eval, cfg.eval_batch_size)?;
            row.eval_acc = Some(last_eval.accuracy);
            if annealing {
                stop = annealer.observe(last_eval.loss);
                let s = annealer.scale;
                adam.config.weights.lr = initial.weights.lr * s;
                adam.config.other.lr = initial.other.lr * s;
                adam.config.quant.lr = initial.quant.lr * s;
            }
        }
        if step == cfg.main_steps && cfg.anneal_max_steps > 0 {
            // Seed the plateau tracker with the state at the end of the main phase.
            if row.eval_acc.is_none() {
                last_eval = evaluate(&net, eval, cfg.eval_batch_size)?;
                row.eval_acc = Some(last_eval.accuracy);
            }
            annealer.observe(last_eval.loss);
        }
        if step == hard_last {
            stop_reason = if cfg.anneal_max_steps > 0 {
                StopReason::AnnealBudget
            } else {
                StopReason::Budget
            };
        }
        emit(row, &mut history)?;
        if let Some(reason) = stop {
            stop_reason = reason;
            break;
        }
    }
    drop(batches);
    let final_size = network_size(&net, cfg.size_mode);
    Ok(TrainOutcome {
        net,
        history,
        prune_events,
        final_eval: last_eval,
        final_size,
        steps: step,
        stop_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(observe: &[f64], patience: usize) -> (Annealer, Vec<Option<StopReason>>) {
        let mut c = TrainConfig::desk();
        c.plateau.patience = patience;
        let mut a = Annealer::new(&c);
        let out = observe.iter().map(|&l| a.observe(l)).collect();
        (a, out)
    }

    #[test]
    fn plateau_halves_after_patience() {
        let (a, out) = cfg(&[1.0, 1.0, 1.0, 1.0], 3);
        assert_eq!(a.scale, 0.5);
        assert!(out.iter().all(|o| o.is_none()));
    }

    #[test]
    fn converges_after_flat_evaluations_post_reduction() {
        let (_, out) = cfg(&[1.0; 7], 3);
        assert_eq!(out[6], Some(StopReason::Converged));
        assert!(out[..6].iter().all(|o| o.is_none()));
    }

    #[test]
    fn improving_loss_never_stops() {
        let losses: Vec<f64> = (0..50).map(|i| 1.0 - i as f64 * 0.01).collect();
        let (a, out) = cfg(&losses, 2);
        assert_eq!(a.scale, 1.0);
        assert!(out.iter().all(|o| o.is_none()));
    }

    #[test]
    fn floor_stops_annealing() {
        let mut c = TrainConfig::desk();
        c.plateau.patience = 1;
        c.plateau.min_lr = 0.3;
        let mut a = Annealer::new(&c);
        let mut stops = Vec::new();
        for i in 0..4 {
            // Strictly worse each time so convergence never triggers first.
            stops.push(a.observe(i as f64));
        }
        assert!(stops.contains(&Some(StopReason::LearningRateFloor)));
    }

    #[test]
    fn accuracy_counts_argmax() {
        let logits = Tensor::new([2, 3], vec![0.1, 0.9, 0.0, 2.0, 1.0, 0.5]).unwrap();
        assert_eq!(argmax_correct(&logits, &[1, 1]), 1);
    }
}
