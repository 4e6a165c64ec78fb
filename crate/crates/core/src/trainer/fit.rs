use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::optim::{Adam, PlateauScheduler};
use super::{clip_gradients, global_norm, weighted_bce_loss, weighted_bce_on_tape, TrainConfig, TrainError};
use crate::autodiff::{Tape, Tensor};
use crate::cunet::{CUNetModel, ModelInputs};
use crate::ingest::IndividualSample;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clip_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate after the scheduler has seen this epoch.
    pub lr: f64,
    /// Fraction of steps whose gradients were clipped.
    pub grad_clip_rate: f64,
}

/// Targets `[B,1,G,G]` from the post-event grids.
pub fn targets(samples: &[&IndividualSample]) -> Result<Tensor<f32>, TrainError> {
    let g = samples.first().ok_or(TrainError::EmptySplit("batch"))?.g();
    let data = samples
        .iter()
        .flat_map(|s| s.v_post.bitmap.iter().map(|&b| f32::from(b)))
        .collect();
    Ok(Tensor::new(&[samples.len(), 1, g, g], data)?)
}

/// Mutable training state: model, optimizer, schedule and shuffle RNG.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: CUNetModel,
    config: TrainConfig,
    adam: Adam<f32>,
    scheduler: PlateauScheduler,
    rng: ChaCha8Rng,
    epoch: usize,
    step: u64,
    best_val: Option<f64>,
}

impl Trainer {
    pub fn new(model: CUNetModel, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let shapes: Vec<&[usize]> = model.parameters().iter().map(|p| p.value.shape()).collect();
        let adam = Adam::new(&shapes);
        let scheduler = PlateauScheduler::new(config.learning_rate, config.plateau_factor, config.plateau_patience, config.min_lr);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            config,
            adam,
            scheduler,
            rng,
            epoch: 0,
            step: 0,
            best_val: None,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        ckpt.train_config.validate()?;
        Ok(Self {
            model: ckpt.model()?,
            config: ckpt.train_config.clone(),
            adam: ckpt.adam.clone(),
            scheduler: ckpt.scheduler.clone(),
            rng: ckpt.rng.clone(),
            epoch: ckpt.epoch,
            step: ckpt.step,
            best_val: ckpt.best_val,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config().clone(),
            train_config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            params: self.model.parameters().to_vec(),
            bn: self.model.batchnorm_stats().to_vec(),
            adam: self.adam.clone(),
            scheduler: self.scheduler.clone(),
            rng: self.rng.clone(),
            best_val: self.best_val,
        }
    }

    pub fn model(&self) -> &CUNetModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn lr(&self) -> f64 {
        self.scheduler.lr
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn scheduler(&self) -> &PlateauScheduler {
        &self.scheduler
    }

    /// Forward, weighted loss, backward, clip, Adam update.
    pub fn train_step(&mut self, inputs: &ModelInputs, target: &Tensor<f32>) -> Result<StepStats, TrainError> {
        let mut tape = Tape::new();
        let fwd = self.model.forward_train(&mut tape, inputs)?;
        let loss_var = weighted_bce_on_tape(&mut tape, fwd.output, target, self.config.w_max as f32)?;
        let loss = f64::from(tape.value(loss_var).data()[0]);
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: self.step });
        }
        tape.backward(loss_var);
        let mut grads: Vec<Tensor<f32>> = fwd
            .params
            .iter()
            .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
            .collect();
        drop(tape);
        let grad_norm = global_norm(&grads);
        let clip_scale = clip_gradients(&mut grads, self.config.clip_norm);
        let lr = self.scheduler.lr;
        self.adam
            .step(self.model.parameters_mut().iter_mut().map(|p| &mut p.value), &grads, lr);
        self.step += 1;
        Ok(StepStats {
            loss,
            grad_norm,
            clip_scale,
        })
    }

    /// Sample-averaged weighted loss of the frozen model.
    pub fn evaluate_loss(&self, samples: &[IndividualSample]) -> Result<f64, TrainError> {
        if samples.is_empty() {
            return Err(TrainError::EmptySplit("evaluation"));
        }
        let mut total = 0.0;
        for chunk in samples.chunks(self.config.batch_size) {
            let refs: Vec<&IndividualSample> = chunk.iter().collect();
            let inputs = ModelInputs::from_samples(&refs)?;
            let pred = self.model.predict(&inputs)?;
            let target = targets(&refs)?;
            let l = weighted_bce_loss(&pred.cast::<f64>(), &target.cast::<f64>(), self.config.w_max)?;
            total += l * chunk.len() as f64;
        }
        Ok(total / samples.len() as f64)
    }

    /// One pass over `train` in a freshly shuffled order, then validation
    /// and a scheduler step.
    pub fn run_epoch(&mut self, train: &[IndividualSample], val: &[IndividualSample]) -> Result<EpochLog, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptySplit("train"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss_sum, mut clipped, mut steps) = (0.0, 0usize, 0usize);
        for idx in order.chunks(self.config.batch_size) {
            let refs: Vec<&IndividualSample> = idx.iter().map(|&i| &train[i]).collect();
            let inputs = ModelInputs::from_samples(&refs)?;
            let target = targets(&refs)?;
            let s = self.train_step(&inputs, &target)?;
            loss_sum += s.loss * refs.len() as f64;
            clipped += usize::from(s.clip_scale < 1.0);
            steps += 1;
        }
        let val_loss = self.evaluate_loss(val)?;
        let lr = self.scheduler.step(val_loss);
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            lr,
            grad_clip_rate: clipped as f64 / steps as f64,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// State after the epoch with the lowest validation loss.
    pub best: Checkpoint,
    /// State when training stopped.
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Trains up to `max_epochs`, stopping early once the schedule is exhausted.
pub fn fit(
    model: CUNetModel,
    train: &[IndividualSample],
    val: &[IndividualSample],
    config: &TrainConfig,
) -> Result<FitOutcome, TrainError> {
    fit_from(Trainer::new(model, config.clone())?, train, val, |_, _| Ok(()))
}

/// Continues `trainer` until its epoch budget or schedule runs out;
/// `on_epoch` sees every finished epoch.
pub fn fit_from(
    mut trainer: Trainer,
    train: &[IndividualSample],
    val: &[IndividualSample],
    mut on_epoch: impl FnMut(&EpochLog, &Trainer) -> Result<(), TrainError>,
) -> Result<FitOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = None;
    while trainer.epoch < trainer.config.max_epochs && !trainer.scheduler.should_stop() {
        let entry = trainer.run_epoch(train, val)?;
        log::info!(
            "epoch {} train {:.5} val {:.5} lr {:.2e} clip {:.2}",
            entry.epoch,
            entry.train_loss,
            entry.val_loss,
            entry.lr,
            entry.grad_clip_rate
        );
        if trainer.best_val.is_none_or(|b| entry.val_loss < b) {
            trainer.best_val = Some(entry.val_loss);
            best = Some(trainer.checkpoint());
        }
        on_epoch(&entry, &trainer)?;
        log.push(entry);
    }
    let last = trainer.checkpoint();
    Ok(FitOutcome {
        best: best.unwrap_or_else(|| last.clone()),
        last,
        log,
    })
}

const LOG_HEADER: &str = "epoch,train_loss,val_loss,lr,grad_clip_rate";

pub fn write_epoch_log(path: &Path, log: &[EpochLog]) -> Result<(), TrainError> {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.train_loss, e.val_loss, e.lr, e.grad_clip_rate
        ));
    }
    fs::write(path, out).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochLog>, TrainError> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let text = fs::read_to_string(path).map_err(io)?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(TrainError::Checkpoint(format!("{}: bad epoch log header", path.display())));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || TrainError::Checkpoint(format!("bad epoch log row `{l}`"));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(EpochLog {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: num(1)?,
                val_loss: num(2)?,
                lr: num(3)?,
                grad_clip_rate: num(4)?,
            })
        })
        .collect()
}
