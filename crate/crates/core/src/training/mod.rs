//! Maximum-likelihood training of flows with Adam.

mod data;

pub use data::{
    load_csv, toy2d, toy2d_split, DataError, Dataset, Split, Toy, TWO_GAUSSIANS_CENTER,
    TWO_GAUSSIANS_STD,
};

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{standard_normal_log_density, FlowError, FlowModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("{} example(s) failed (indices {indices:?}); first: {first}", indices.len())]
    Batch { indices: Vec<usize>, first: FlowError },
    #[error("shape mismatch: expected {expected} entries, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training split is empty")]
    NoTrainingData,
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplies the learning rate every `decay_every` epochs.
    pub lr_decay: f64,
    /// 0 disables the schedule.
    pub decay_every: usize,
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement; 0 disables.
    pub patience: usize,
    /// When a batch diverges, undo up to this many recent steps until it
    /// evaluates again and halve the learning rate; 0 ends the run at once.
    pub max_rollbacks: usize,
    /// Rescale each batch gradient to at most this Euclidean norm; 0 disables.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 100,
            learning_rate: 0.001,
            lr_decay: 0.5,
            decay_every: 100,
            seed: 0,
            patience: 20,
            max_rollbacks: 64,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push("batch_size must be positive".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.clip_norm >= 0.0) {
            out.push(format!("clip_norm must be non-negative, got {}", self.clip_norm));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            out.push(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        out
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.decay_every {
            0 => self.learning_rate,
            k => self.learning_rate * self.lr_decay.powi((epoch / k) as i32),
        }
    }
}

/// Bias-corrected Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
) -> Result<(), TrainError> {
    for len in [params.len(), grads.len()] {
        if len != state.m.len() {
            return Err(TrainError::Shape {
                expected: state.m.len(),
                got: len,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

fn check_batch<'a>(model: &FlowModel, batch: &'a [Vec<f64>]) -> Result<&'a [Vec<f64>], TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if let Some(r) = batch.iter().find(|r| r.len() != model.dim()) {
        return Err(TrainError::Shape {
            expected: model.dim(),
            got: r.len(),
        });
    }
    Ok(batch)
}

fn collect_failures<T>(results: Vec<Result<T, FlowError>>) -> Result<Vec<T>, TrainError> {
    let mut ok = Vec::with_capacity(results.len());
    let mut indices = Vec::new();
    let mut first = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                indices.push(i);
                first.get_or_insert(e);
            }
        }
    }
    match first {
        None => Ok(ok),
        Some(first) => Err(TrainError::Batch { indices, first }),
    }
}

/// Mean negative log-likelihood (nats per example).
pub fn nll(model: &FlowModel, batch: &[Vec<f64>]) -> Result<f64, TrainError> {
    let batch = check_batch(model, batch)?;
    let lps = collect_failures(batch.par_iter().map(|y| model.log_density(y)).collect())?;
    Ok(-lps.iter().sum::<f64>() / batch.len() as f64)
}

/// Mean negative log-likelihood and its exact gradient in the model's flat
/// parameter layout. Per-example work runs in parallel; the reduction is
/// sequential in index order, so results are bitwise reproducible.
pub fn nll_and_grad(model: &FlowModel, batch: &[Vec<f64>]) -> Result<(f64, Vec<f64>), TrainError> {
    let batch = check_batch(model, batch)?;
    let per = collect_failures(
        batch
            .par_iter()
            .map(|y| model.log_density_grad(y).map(|(lp, g, _)| (lp, g)))
            .collect(),
    )?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.n_params()];
    for (lp, g) in per {
        loss -= lp;
        for (a, b) in grad.iter_mut().zip(g) {
            *a -= b;
        }
    }
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

/// Scales `grad` down to Euclidean norm `max_norm` when it is larger.
pub fn clip_gradient(grad: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= k);
    }
}

/// NLL of the standard-normal base, i.e. of an untrained identity flow.
pub fn identity_nll(rows: &[Vec<f64>]) -> f64 {
    -rows.iter().map(|r| standard_normal_log_density(r)).sum::<f64>() / rows.len() as f64
}

/// Monte Carlo differential entropy `−E[log p]` of a toy density with a
/// closed form, and its standard error.
pub fn toy_entropy(toy: Toy, n: usize, seed: u64) -> Option<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals: Option<Vec<f64>> = (0..n)
        .map(|_| toy.log_density(toy.sample_one(&mut rng)).map(|l| -l))
        .collect();
    let vals = vals?;
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
    Some((mean, (var / n as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub best_val_nll: f64,
    /// Rate in effect at the end of the epoch.
    pub learning_rate: f64,
    /// Steps undone after a diverging batch.
    pub rollbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    Completed,
    EarlyStopped { epoch: usize },
    Failed { epoch: usize, error: TrainError },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation NLL.
    pub model: FlowModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stop: StopReason,
    pub rollbacks: usize,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        history_csv(&self.history)
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_nll,val_nll\n");
    for r in history {
        let _ = writeln!(s, "{},{},{}", r.epoch, r.train_nll, r.val_nll);
    }
    s
}

/// Runs minibatch Adam on the training split, keeps the parameters with the
/// best validation NLL (training NLL when there is no validation split) and
/// stops early after `patience` epochs without improvement.
///
/// A batch that still diverges after `max_rollbacks` rollbacks ends the run;
/// the history up to that point and the best model so far are returned with
/// [`StopReason::Failed`].
pub fn train(model: FlowModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(TrainError::Config(problems.join("; ")));
    }
    if data.train.is_empty() {
        return Err(TrainError::NoTrainingData);
    }
    if data.dim != model.dim() {
        return Err(TrainError::Shape {
            expected: model.dim(),
            got: data.dim,
        });
    }

    let mut model = model;
    let mut best = model.clone();
    let mut history = Vec::new();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            history,
            best_epoch: None,
            stop: StopReason::Completed,
            rollbacks: 0,
        });
    }

    let mut params = model.params();
    let mut adam = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = None;
    let mut stale = 0;
    let mut stop = StopReason::Completed;

    let mut lr_scale = 1.0;
    let mut snapshots: VecDeque<(Vec<f64>, AdamState)> = VecDeque::new();
    let mut rollbacks_total = 0;

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut rollbacks = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let mut consecutive = 0;
            loop {
                match nll_and_grad(&model, &batch) {
                    Ok((loss, mut grad)) => {
                        clip_gradient(&mut grad, cfg.clip_norm);
                        if cfg.max_rollbacks > 0 {
                            snapshots.push_back((params.clone(), adam.clone()));
                            if snapshots.len() > cfg.max_rollbacks {
                                snapshots.pop_front();
                            }
                        }
                        adam_step(&mut adam, &mut params, &grad, cfg.lr_at(epoch) * lr_scale)?;
                        model.set_params(&params).expect("parameter count is fixed");
                        total += loss * chunk.len() as f64;
                        break;
                    }
                    Err(TrainError::Batch { indices, first }) => {
                        match snapshots.pop_back() {
                            Some((p, a)) if consecutive < cfg.max_rollbacks => {
                                params = p;
                                adam = a;
                                model.set_params(&params).expect("parameter count is fixed");
                                if consecutive == 0 {
                                    lr_scale *= 0.5;
                                }
                                consecutive += 1;
                                rollbacks += 1;
                            }
                            _ => {
                                rollbacks_total += rollbacks;
                                let error = TrainError::Batch {
                                    indices: indices.into_iter().map(|i| chunk[i]).collect(),
                                    first,
                                };
                                stop = StopReason::Failed { epoch, error };
                                break 'epochs;
                            }
                        }
                    }
                    Err(error) => {
                        stop = StopReason::Failed { epoch, error };
                        break 'epochs;
                    }
                }
            }
        }
        rollbacks_total += rollbacks;
        let train_nll = total / data.train.len() as f64;
        // a diverging validation example counts as "no improvement"
        let val_nll = if data.val.is_empty() {
            train_nll
        } else {
            nll(&model, &data.val).unwrap_or(f64::INFINITY)
        };
        if val_nll < best_val {
            best_val = val_nll;
            best_epoch = Some(epoch);
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        history.push(EpochRecord {
            epoch,
            train_nll,
            val_nll,
            best_val_nll: best_val,
            learning_rate: cfg.lr_at(epoch) * lr_scale,
            rollbacks,
        });
        if cfg.patience > 0 && stale >= cfg.patience {
            stop = StopReason::EarlyStopped { epoch };
            break;
        }
    }

    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        stop,
        rollbacks: rollbacks_total,
    })
}
