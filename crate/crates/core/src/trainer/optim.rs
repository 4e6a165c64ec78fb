use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};

/// Minimum decrease of the validation loss that counts as an improvement.
pub const PLATEAU_TOLERANCE: f64 = 1e-6;

/// Bias-corrected Adam, `p ← p − lr · m̂ / (√v̂ + ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<T>>, grads: &[Tensor<T>], lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let c1 = T::one() - T::from_f64_lossy(self.beta1.powi(t));
        let c2 = T::one() - T::from_f64_lossy(self.beta2.powi(t));
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(self.eps);
        let mut n = 0;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            n += 1;
        }
        assert_eq!(n, grads.len(), "parameter count");
    }
}

/// Reduce-on-plateau over the validation loss.
///
/// After `patience` consecutive epochs without an improvement of at least
/// [`PLATEAU_TOLERANCE`] the rate is multiplied by `factor` (floored at
/// `min_lr`) and the counter restarts. Once at the floor, another full
/// patience window without improvement marks the run as finished.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub best: Option<f64>,
    pub stagnant: usize,
    pub exhausted: bool,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_lr,
            best: None,
            stagnant: 0,
            exhausted: false,
        }
    }

    pub fn step(&mut self, val_loss: f64) -> f64 {
        let improved = self.best.is_none_or(|b| val_loss <= b - PLATEAU_TOLERANCE);
        if improved {
            self.best = Some(val_loss);
            self.stagnant = 0;
            return self.lr;
        }
        self.stagnant += 1;
        if self.stagnant >= self.patience {
            self.stagnant = 0;
            if self.lr <= self.min_lr {
                self.exhausted = true;
            } else {
                self.lr = (self.lr * self.factor).max(self.min_lr);
            }
        }
        self.lr
    }

    /// True once the floor has been reached and a further patience window
    /// passed without improvement.
    pub fn should_stop(&self) -> bool {
        self.exhausted
    }
}
