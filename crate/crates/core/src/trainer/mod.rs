//! Weighted BCE objective, Adam with a plateau schedule, gradient clipping,
//! checkpoints and the training loop.

mod checkpoint;
mod fit;
mod optim;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Real, Tape, Tensor, Var};
use crate::cunet::CunetError;

pub use checkpoint::Checkpoint;
pub use fit::{fit, fit_from, read_epoch_log, targets, write_epoch_log, EpochLog, FitOutcome, StepStats, Trainer};
pub use optim::{Adam, PlateauScheduler, PLATEAU_TOLERANCE};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Model(#[from] CunetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(CunetError::Autodiff(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub w_max: f64,
    pub clip_norm: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
    pub binarize_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 50,
            w_max: 10.0,
            clip_norm: 1.0,
            plateau_factor: 0.5,
            plateau_patience: 3,
            min_lr: 1e-5,
            seed: 0,
            binarize_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.w_max >= 1.0) {
            return bad("w_max must be at least 1");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.min_lr > 0.0) || self.min_lr > self.learning_rate {
            return bad("need 0 < min_lr <= learning_rate");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.plateau_patience == 0 {
            return bad("batch_size, max_epochs and plateau_patience must be positive");
        }
        if !(0.0..=1.0).contains(&self.binarize_threshold) {
            return bad("binarize_threshold must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Fraction of ones in a binary grid.
pub fn visit_ratio(grid: &[u8]) -> f64 {
    if grid.is_empty() {
        return 0.0;
    }
    grid.iter().filter(|&&b| b != 0).count() as f64 / grid.len() as f64
}

/// `1 + (w_max − 1)(1 − r)`.
pub fn sample_weight<T: Real>(r: T, w_max: T) -> T {
    T::one() + (w_max - T::one()) * (T::one() - r)
}

/// Per-sample weights from a `[B, ...]` binary target batch.
pub fn batch_weights<T: Real>(target: &Tensor<T>, w_max: T) -> Vec<T> {
    let b = target.shape().first().copied().unwrap_or(0);
    if b == 0 {
        return Vec::new();
    }
    let per = target.len() / b;
    let n = T::from_usize(per).unwrap();
    target
        .data()
        .chunks(per)
        .map(|c| {
            let ones = c.iter().filter(|&&v| v > T::zero()).count();
            sample_weight(T::from_usize(ones).unwrap() / n, w_max)
        })
        .collect()
}

/// Records the weighted loss on `tape`; `target` is a constant.
pub fn weighted_bce_on_tape<T: Real>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>, w_max: T) -> Result<Var, TrainError> {
    if tape.value(pred).shape() != target.shape() || target.rank() < 2 {
        return Err(TrainError::ShapeMismatch(format!(
            "pred {:?} vs target {:?}",
            tape.value(pred).shape(),
            target.shape()
        )));
    }
    let weights = batch_weights(target, w_max);
    let t = tape.constant(target.clone());
    let bce = tape.bce_elementwise(pred, t)?;
    Ok(tape.weighted_sample_mean(bce, &weights)?)
}

/// Batch mean of `w_u · mean-over-cells BCE(pred_u, target_u)`.
pub fn weighted_bce_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, w_max: T) -> Result<T, TrainError> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let loss = weighted_bce_on_tape(&mut tape, p, target, w_max)?;
    Ok(tape.value(loss).data()[0])
}

/// Global L2 norm over all gradient tensors, accumulated in 64-bit.
pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Scales every gradient by `clip_norm / norm` when the global norm exceeds
/// `clip_norm`; returns the applied scale.
pub fn clip_gradients<T: Real>(grads: &mut [Tensor<T>], clip_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if !(norm > clip_norm) {
        return 1.0;
    }
    let scale = clip_norm / norm;
    let s = T::from_f64_lossy(scale);
    for g in grads.iter_mut() {
        g.scale(s);
    }
    scale
}
