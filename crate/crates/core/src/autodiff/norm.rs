use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use super::AutodiffError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-channel running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

impl<T: Real> Tape<T> {
    /// Batch normalization over `(B, H, W)` per channel.
    ///
    /// Train mode normalizes with batch statistics (biased variance) and
    /// folds them into `stats` (unbiased variance, exponential momentum);
    /// eval mode normalizes with `stats`.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: NormMode,
        cfg: BatchNormConfig,
    ) -> Result<Var, AutodiffError> {
        let x = self.value(input);
        let (batch, ch, h, w) = x.dims4()?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [ch] {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "batchnorm affine shape {:?}, expected [{ch}]",
                    self.value(p).shape()
                )));
            }
        }
        if stats.channels() != ch {
            return Err(AutodiffError::ShapeMismatch(format!(
                "running stats have {} channels, input {ch}",
                stats.channels()
            )));
        }
        let plane = h * w;
        let count = batch * plane;
        if mode == NormMode::Train && count == 1 {
            return Err(AutodiffError::DegenerateBatch);
        }
        let eps = T::from_f64_lossy(cfg.eps);
        let xd = x.data();
        let (mean, var) = match mode {
            NormMode::Train => {
                let mut mean = vec![T::zero(); ch];
                let mut var = vec![T::zero(); ch];
                let n = T::from_usize(count).unwrap();
                for c in 0..ch {
                    let mut s = T::zero();
                    for b in 0..batch {
                        let off = (b * ch + c) * plane;
                        s += xd[off..off + plane].iter().copied().sum::<T>();
                    }
                    let m = s / n;
                    let mut sq = T::zero();
                    for b in 0..batch {
                        let off = (b * ch + c) * plane;
                        sq += xd[off..off + plane].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                    }
                    mean[c] = m;
                    var[c] = sq / n;
                }
                let mom = T::from_f64_lossy(cfg.momentum);
                let unbias = n / (n - T::one());
                for c in 0..ch {
                    stats.mean[c] = (T::one() - mom) * stats.mean[c] + mom * mean[c];
                    stats.var[c] = (T::one() - mom) * stats.var[c] + mom * var[c] * unbias;
                }
                (mean, var)
            }
            NormMode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut normed = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * plane;
                for i in off..off + plane {
                    let xh = (xd[i] - mean[c]) * inv_std[c];
                    normed[i] = xh;
                    out[i] = gd[c] * xh + bd[c];
                }
            }
        }
        let shape = x.shape().to_vec();
        let value = Tensor::new(&shape, out)?;
        Ok(self.record(value, &[input, gamma, beta], move |g, nodes| {
            let g = g.data();
            let gd = nodes[gamma.0].value.data();
            let mut dgamma = vec![T::zero(); ch];
            let mut dbeta = vec![T::zero(); ch];
            for b in 0..batch {
                for c in 0..ch {
                    let off = (b * ch + c) * plane;
                    for i in off..off + plane {
                        dgamma[c] += g[i] * normed[i];
                        dbeta[c] += g[i];
                    }
                }
            }
            let mut dx = vec![T::zero(); g.len()];
            match mode {
                NormMode::Train => {
                    let n = T::from_usize(count).unwrap();
                    for c in 0..ch {
                        let mean_dy = dbeta[c] / n;
                        let mean_dy_xh = dgamma[c] / n;
                        let k = gd[c] * inv_std[c];
                        for b in 0..batch {
                            let off = (b * ch + c) * plane;
                            for i in off..off + plane {
                                dx[i] = k * (g[i] - mean_dy - normed[i] * mean_dy_xh);
                            }
                        }
                    }
                }
                NormMode::Eval => {
                    for b in 0..batch {
                        for c in 0..ch {
                            let off = (b * ch + c) * plane;
                            let k = gd[c] * inv_std[c];
                            for i in off..off + plane {
                                dx[i] = k * g[i];
                            }
                        }
                    }
                }
            }
            vec![
                (input, Tensor::new(&shape, dx).expect("dx shape")),
                (gamma, Tensor::new(&[ch], dgamma).expect("dgamma shape")),
                (beta, Tensor::new(&[ch], dbeta).expect("dbeta shape")),
            ]
        }))
    }
}
