//! Training: Adam with global-norm gradient clipping, class-weighted loss,
//! early stopping with best-checkpoint restore, learning-rate reduction on
//! plateau, and the evaluation/ablation harnesses.

mod ablation;
mod metrics;

pub use ablation::{render_ablation_table, run_ablation, AblationRow};
pub use metrics::{
    confusion_matrix, evaluate, metrics_from_confusion, render_report, ClassMetrics,
    MetricsReport,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ForwardCtx, ParamSet};
use crate::model::Model;
use crate::preprocess::{stratified_split, ClassWeights, WindowedDataset};
use crate::seeds;
use crate::tensor::{Graph, Tensor};

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Stratified share of the training set held out for early stopping.
    pub validation_fraction: f64,
    /// Halve the learning rate after this many stagnant epochs.
    pub lr_plateau_patience: usize,
    pub lr_plateau_factor: f64,
    pub min_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 64,
            max_epochs: 50,
            early_stop_patience: 10,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            validation_fraction: 0.1,
            lr_plateau_patience: 5,
            lr_plateau_factor: 0.5,
            min_learning_rate: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.early_stop_patience > self.max_epochs && self.max_epochs > 0 {
            return Err(Error::Config(format!(
                "early_stop_patience {} exceeds max_epochs {}",
                self.early_stop_patience, self.max_epochs
            )));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("clip_norm", self.clip_norm),
            ("eps", self.eps),
            ("lr_plateau_factor", self.lr_plateau_factor),
            ("min_learning_rate", self.min_learning_rate),
        ] {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "validation_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Adam moment buffers, shaped like the parameter set.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self { step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimizer step over the gradients currently stored on the parameters.
///
/// The global L2 norm is computed over all gradients; if it exceeds
/// `clip_norm` every gradient is scaled by `clip_norm / norm` before the
/// bias-corrected Adam update. Missing gradients count as zeros. Returns the
/// pre-clip global norm.
pub fn adam_step(
    params: &mut ParamSet,
    state: &mut AdamState,
    learning_rate: f64,
    config: &TrainConfig,
) -> Result<f64> {
    let mut norm_sq = 0.0;
    for p in params.iter() {
        if let Some(g) = p.tensor.grad() {
            norm_sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = norm_sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite { op: "adam_step" });
    }
    let scale = if norm > config.clip_norm {
        config.clip_norm / norm
    } else {
        1.0
    };

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);

    for (i, p) in params.iter_mut().enumerate() {
        let n = p.tensor.numel();
        let grad_owned;
        let grad: &[f64] = match p.tensor.grad() {
            Some(g) => g,
            None => {
                grad_owned = vec![0.0; n];
                &grad_owned
            }
        };
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        // The tensor invariant (finite values) re-checks the update.
        let mut data = p.tensor.data().to_vec();
        for j in 0..n {
            let g = grad[j] * scale;
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            data[j] -= learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
        p.tensor = Tensor::new(p.tensor.shape().to_vec(), data)?.with_requires_grad();
    }
    Ok(norm)
}

/// Per-epoch statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
}

/// Full training trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub seed: u64,
}

/// Weighted cross-entropy of predictions against targets, computed directly
/// (no graph); used for validation monitoring, without the L2 penalty.
fn plain_weighted_ce(probs: &Tensor, targets: &[usize], weights: &[f64]) -> f64 {
    let c = *probs.shape().last().unwrap();
    let mut total = 0.0;
    for (b, &y) in targets.iter().enumerate() {
        let p = probs.data()[b * c + y].max(1e-12);
        total -= weights[y] * p.ln();
    }
    total / targets.len() as f64
}

fn accuracy_of(probs: &Tensor, targets: &[usize]) -> f64 {
    let c = *probs.shape().last().unwrap();
    let correct = probs
        .data()
        .chunks(c)
        .zip(targets)
        .filter(|(row, &y)| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                == Some(y)
        })
        .count();
    correct as f64 / targets.len() as f64
}

/// Trains the model with shuffled mini-batches, early stopping on validation
/// loss, learning-rate reduction on plateau, and best-checkpoint restore.
/// Bit-reproducible for a fixed seed.
pub fn train(
    model: &mut Model,
    train_ds: &WindowedDataset,
    config: &TrainConfig,
    class_weights: &ClassWeights,
) -> Result<History> {
    config.validate()?;
    if train_ds.is_empty() {
        return Err(Error::Data("train: empty dataset".into()));
    }
    let mut history = History {
        epochs: Vec::new(),
        best_epoch: None,
        stopped_early: false,
        seed: config.seed,
    };
    if config.max_epochs == 0 {
        return Ok(history);
    }

    let (fit, val) = if config.validation_fraction > 0.0 {
        stratified_split(
            train_ds,
            config.validation_fraction,
            seeds::derive(config.seed, "validation"),
        )?
    } else {
        (train_ds.clone(), train_ds.subset(&[]))
    };
    if fit.is_empty() {
        return Err(Error::Data("train: empty fit split".into()));
    }
    let weights_vec = class_weights.as_vec();
    let fit_targets = fit.label_indices();
    let val_targets = val.label_indices();

    let mut adam = AdamState::new(model.params());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.seed, "shuffle"));
    let mut lr = config.learning_rate;
    let step = fit.t() * fit.f();

    let mut best_val = f64::INFINITY;
    let mut best_state: Option<(ParamSet, Vec<(Vec<f64>, Vec<f64>)>)> = None;
    let mut since_best = 0usize;
    let mut since_lr_drop = 0usize;

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..fit.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let mut data = Vec::with_capacity(batch.len() * step);
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                data.extend_from_slice(fit.window(i));
                targets.push(fit_targets[i]);
            }
            let x = Tensor::new(vec![batch.len(), fit.t(), fit.f()], data)?;

            let mut graph = Graph::new();
            let xv = graph.constant(x);
            let mut ctx = ForwardCtx::train(seeds::derive(
                config.seed,
                &format!("dropout/{epoch}/{batch_idx}"),
            ));
            model.params_mut().zero_grads();
            let (loss, pass) = model.loss(&mut graph, xv, &targets, &weights_vec, &mut ctx)?;
            graph.backward(loss)?;
            let bound = pass.bound;
            epoch_loss += graph.tensor(loss).scalar_value()? * batch.len() as f64;
            epoch_correct += accuracy_of(graph.tensor(pass.probs), &targets) * batch.len() as f64;

            model.params_mut().absorb_grads(&graph, &bound);
            drop(graph);
            adam_step(model.params_mut(), &mut adam, lr, config)?;
        }

        let train_loss = epoch_loss / fit.len() as f64;
        let train_accuracy = epoch_correct / fit.len() as f64;
        let (val_loss, val_accuracy) = if val.is_empty() {
            (train_loss, train_accuracy)
        } else {
            let pred = model.predict(&val.windows)?;
            (
                plain_weighted_ce(&pred.probs, &val_targets, &weights_vec),
                accuracy_of(&pred.probs, &val_targets),
            )
        };
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
            learning_rate: lr,
        });
        log::info!(
            "epoch {epoch}: train loss {train_loss:.5} acc {train_accuracy:.4} | \
             val loss {val_loss:.5} acc {val_accuracy:.4} | lr {lr:.6}"
        );

        if val_loss < best_val {
            best_val = val_loss;
            history.best_epoch = Some(epoch);
            best_state = Some((model.params().clone(), model.bn_running_stats()));
            since_best = 0;
            since_lr_drop = 0;
        } else {
            since_best += 1;
            since_lr_drop += 1;
            if since_lr_drop >= config.lr_plateau_patience {
                lr = (lr * config.lr_plateau_factor).max(config.min_learning_rate);
                since_lr_drop = 0;
            }
            if since_best >= config.early_stop_patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    if let Some((params, bn)) = best_state {
        *model.params_mut() = params;
        model.set_bn_running_stats(&bn)?;
    }
    Ok(history)
}
