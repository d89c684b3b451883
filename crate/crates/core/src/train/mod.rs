//! Optimization, grouped cross-validation and evaluation.
//!
//! Every random choice (splits, initialization, shuffling, dropout masks) is
//! drawn from a stream keyed by the run seed and its position in the run, so
//! folds may execute in any order or in parallel with identical results.

pub mod config;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod schedule;
pub mod split;

use std::collections::BTreeSet;

use indexmap::IndexMap;
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::TrainConfig;
pub use metrics::{compute_metrics, confusion_matrix, Metrics};
pub use optim::{adamw_step, AdamW, AdamWState};
pub use report::write_reports;
pub use schedule::{EarlyStopping, ReduceOnPlateau, StopDecision};
pub use split::{grouped_holdout, grouped_kfold, Fold};

use crate::error::{Error, Result};
use crate::graph::{batch_graphs, EEGGraph, GraphBatch};
use crate::model::{model_forward, ModelConfig, ModelParams};
use crate::numerics::{smoothed_ce_forward, smoothed_ce_grad, stream, Mode, OpRng, Tape, Tensor};

// Stream tags under the run seed.
const SPLIT: u64 = 0;
const HOLDOUT: u64 = 1;
const INIT: u64 = 2;
const SHUFFLE: u64 = 3;
const DROPOUT: u64 = 4;

/// Mean label-smoothed cross-entropy of `[B, K]` logits and its gradient.
pub fn label_smoothed_ce(logits: &Tensor, targets: &[usize], smoothing: f64) -> Result<(f64, Tensor)> {
    let (loss, probs) = smoothed_ce_forward(logits, targets, smoothing)?;
    let k = logits.shape()[1];
    let grad = Tensor::new(logits.shape().to_vec(), smoothed_ce_grad(&probs, targets, smoothing, k))?;
    Ok((loss, grad))
}

/// One optimizer step on `batch`; returns the training loss before the step.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut AdamWState,
    batch: &GraphBatch,
    lr: f64,
    cfg: &TrainConfig,
    rng: &mut OpRng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = model_forward(&mut tape, batch, &params.config, &bound, &mut params.batch_norm, Mode::Train, rng)?;
    let loss = tape.cross_entropy(out.logits, &batch.labels, cfg.label_smoothing)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let named: IndexMap<String, Tensor> = bound
        .vars
        .iter()
        .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
        .collect();
    adamw_step(&mut params.tensors, &named, state, lr, &AdamW::from_config(cfg))?;
    Ok(value)
}

fn gather(graphs: &[EEGGraph], idx: &[usize]) -> Result<GraphBatch> {
    let picked: Vec<EEGGraph> = idx.iter().map(|&i| graphs[i].clone()).collect();
    batch_graphs(&picked)
}

/// Eval-mode mean loss and arg-max predictions over `idx`.
pub fn evaluate(
    params: &ModelParams,
    graphs: &[EEGGraph],
    idx: &[usize],
    batch_size: usize,
    smoothing: f64,
) -> Result<(f64, Vec<usize>)> {
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = gather(graphs, chunk)?;
        let logits = params.predict(&batch)?;
        let (loss, _) = smoothed_ce_forward(&logits, &batch.labels, smoothing)?;
        total += loss * chunk.len() as f64;
        let k = logits.shape()[1];
        for row in logits.data().chunks_exact(k) {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            preds.push(best);
        }
    }
    Ok((total / idx.len().max(1) as f64, preds))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub metrics: Metrics,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Validation loss of the freshly initialized model.
    pub initial_val_loss: f64,
    pub history: Vec<EpochRecord>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

/// A fold's result together with its restored parameters and test
/// predictions.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub result: FoldResult,
    pub params: ModelParams,
    pub test_predictions: Vec<usize>,
}

fn diverged(fold: usize, epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(reason) => Error::Diverged { fold, epoch, reason },
        Error::Optimizer { name, reason } => Error::Diverged { fold, epoch, reason: format!("`{name}`: {reason}") },
        other => other,
    }
}

fn trial_set(graphs: &[EEGGraph], idx: &[usize]) -> BTreeSet<u64> {
    idx.iter().map(|&i| graphs[i].trial_id).collect()
}

/// Trains on `fold.train` (minus a trial-grouped validation holdout) with
/// early stopping, restores the best epoch and evaluates on `fold.test`.
pub fn train_fold(
    graphs: &[EEGGraph],
    fold: &Fold,
    fold_index: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<FoldOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if fold.test.is_empty() {
        return Err(Error::Split(format!("fold {fold_index} has an empty test split")));
    }
    let fi = fold_index as u64;
    let trial_ids: Vec<u64> = graphs.iter().map(|g| g.trial_id).collect();
    let (train_idx, val_idx) =
        grouped_holdout(&fold.train, &trial_ids, cfg.validation_fraction, &mut stream(cfg.seed, &[HOLDOUT, fi]))?;
    if !trial_set(graphs, &train_idx).is_disjoint(&trial_set(graphs, &val_idx)) {
        return Err(Error::Contract("validation trials leaked into training".into()));
    }

    let init_seed = stream(cfg.seed, &[INIT, fi]).gen::<u64>();
    let mut params = ModelParams::init(model_cfg, init_seed)?;
    let mut state = AdamWState::default();
    let mut plateau = ReduceOnPlateau::new(
        cfg.learning_rate,
        cfg.scheduler_factor,
        cfg.scheduler_patience,
        cfg.min_delta,
        cfg.min_learning_rate,
    );
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience, cfg.min_delta);
    let mut best = params.clone();
    let mut history = Vec::new();
    let mut lr = cfg.learning_rate;
    let (initial_val_loss, _) = evaluate(&params, graphs, &val_idx, cfg.batch_size, cfg.label_smoothing)
        .map_err(diverged(fold_index, 0))?;

    for epoch in 1..=cfg.max_epochs {
        let ep = epoch as u64;
        let mut order = train_idx.clone();
        order.shuffle(&mut stream(cfg.seed, &[SHUFFLE, fi, ep]));
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = gather(graphs, chunk)?;
            let mut rng = OpRng::new(cfg.seed, &[DROPOUT, fi, ep, b as u64]);
            let loss = train_step(&mut params, &mut state, &batch, lr, cfg, &mut rng)
                .map_err(diverged(fold_index, epoch))?;
            sum += loss * chunk.len() as f64;
        }
        let train_loss = sum / order.len() as f64;
        let (val_loss, _) = evaluate(&params, graphs, &val_idx, cfg.batch_size, cfg.label_smoothing)
            .map_err(diverged(fold_index, epoch))?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Diverged {
                fold: fold_index,
                epoch,
                reason: format!("train loss {train_loss}, validation loss {val_loss}"),
            });
        }
        history.push(EpochRecord { epoch, train_loss, val_loss, lr });
        debug!("fold {fold_index} epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:.2e}");
        let decision = stopper.step(val_loss);
        if decision.is_best {
            best = params.clone();
        }
        lr = plateau.step(val_loss);
        if decision.stop {
            break;
        }
    }

    let (_, preds) = evaluate(&best, graphs, &fold.test, cfg.batch_size, cfg.label_smoothing)?;
    let truth: Vec<usize> = fold.test.iter().map(|&i| graphs[i].label).collect();
    let metrics = compute_metrics(&confusion_matrix(&truth, &preds, model_cfg.n_classes)?)?;
    let result = FoldResult {
        fold: fold_index,
        metrics,
        best_epoch: stopper.best_epoch().unwrap_or(0),
        epochs_run: history.len(),
        initial_val_loss,
        history,
        n_train: train_idx.len(),
        n_val: val_idx.len(),
        n_test: fold.test.len(),
    };
    info!(
        "fold {fold_index}: accuracy {:.4} after {} epochs (best {})",
        result.metrics.accuracy, result.epochs_run, result.best_epoch
    );
    Ok(FoldOutcome { result, params: best, test_predictions: preds })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub kappa: MeanStd,
}

impl Summary {
    pub fn of(folds: &[FoldResult]) -> Self {
        let pick = |f: fn(&Metrics) -> f64| MeanStd::of(&folds.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
        Self {
            accuracy: pick(|m| m.accuracy),
            precision: pick(|m| m.precision),
            recall: pick(|m| m.recall),
            f1: pick(|m| m.f1),
            kappa: pick(|m| m.kappa),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub folds: Vec<Fold>,
    pub outcomes: Vec<FoldOutcome>,
    pub summary: Summary,
}

impl CrossValidation {
    pub fn results(&self) -> Vec<FoldResult> {
        self.outcomes.iter().map(|o| o.result.clone()).collect()
    }
}

/// Outer trial-grouped `k`-fold cross-validation. Folds run in parallel on the
/// current rayon pool.
pub fn cross_validate(graphs: &[EEGGraph], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<CrossValidation> {
    cfg.validate()?;
    let trial_ids: Vec<u64> = graphs.iter().map(|g| g.trial_id).collect();
    let folds = grouped_kfold(&trial_ids, cfg.k_folds, &mut stream(cfg.seed, &[SPLIT]))?;
    for (i, f) in folds.iter().enumerate() {
        if !trial_set(graphs, &f.train).is_disjoint(&trial_set(graphs, &f.test)) {
            return Err(Error::Contract(format!("fold {i} shares trials between train and test")));
        }
    }
    let outcomes = folds
        .par_iter()
        .enumerate()
        .map(|(i, f)| train_fold(graphs, f, i, model_cfg, cfg))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<FoldResult> = outcomes.iter().map(|o| o.result.clone()).collect();
    let summary = Summary::of(&results);
    Ok(CrossValidation { folds, outcomes, summary })
}
