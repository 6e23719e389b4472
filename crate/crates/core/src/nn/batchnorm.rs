use super::{join_name, Matrix, Module};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch normalization over the rows of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub running_mean: Matrix,
    pub running_var: Matrix,
}

/// Batch statistics of one training-mode forward, detached from the
/// activations so they can be committed later.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    mode: Mode,
    xhat: Matrix,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var_unbiased: Vec<f64>,
}

impl BnCache {
    /// `None` when no batch statistics were taken.
    pub fn stats(&self) -> Option<BnStats> {
        (!self.batch_mean.is_empty()).then(|| BnStats {
            mean: self.batch_mean.clone(),
            var_unbiased: self.batch_var_unbiased.clone(),
        })
    }
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, channels, 1.0),
            beta: Matrix::zeros(1, channels),
            running_mean: Matrix::zeros(1, channels),
            running_var: Matrix::filled(1, channels, 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.cols()
    }

    pub fn forward(&self, x: &Matrix, mode: Mode) -> Result<(Matrix, BnCache)> {
        let c = self.channels();
        if x.cols() != c {
            return Err(Error::shape("batchnorm_forward", c, x.cols()));
        }
        let (mean, var, batch_var_unbiased) = match mode {
            Mode::Train => batch_stats(x)?,
            Mode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
                Vec::new(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        let (gamma, beta) = (self.gamma.data(), self.beta.data());
        for (xr, yr) in xhat.data_mut().chunks_exact_mut(c).zip(y.data_mut().chunks_exact_mut(c)) {
            for j in 0..c {
                let h = (xr[j] - mean[j]) * inv_std[j];
                xr[j] = h;
                yr[j] = gamma[j] * h + beta[j];
            }
        }
        Ok((
            y,
            BnCache {
                mode,
                xhat,
                inv_std,
                batch_mean: if mode == Mode::Train { mean } else { Vec::new() },
                batch_var_unbiased,
            },
        ))
    }

    /// Inference-only normalization with the running statistics followed by
    /// a relu, in place and without a cache.
    pub fn infer_relu_in_place(&self, x: &mut Matrix) -> Result<()> {
        let c = self.channels();
        if x.cols() != c {
            return Err(Error::shape("batchnorm_infer", c, x.cols()));
        }
        let inv_std: Vec<f64> = self.running_var.data().iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (mean, gamma, beta) = (self.running_mean.data(), self.gamma.data(), self.beta.data());
        for row in x.data_mut().chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = (gamma[j] * ((row[j] - mean[j]) * inv_std[j]) + beta[j]).max(0.0);
            }
        }
        Ok(())
    }

    /// Normalizes with the running statistics like [`Mode::Eval`], but also
    /// records the batch statistics so they can be committed.
    pub fn forward_frozen(&self, x: &Matrix) -> Result<(Matrix, BnCache)> {
        let (y, mut cache) = self.forward(x, Mode::Eval)?;
        let (mean, _, unbiased) = batch_stats(x)?;
        cache.batch_mean = mean;
        cache.batch_var_unbiased = unbiased;
        Ok((y, cache))
    }

    /// Folds the batch statistics of a training-mode forward into the
    /// running estimates.
    pub fn commit(&mut self, cache: &BnCache) {
        if let Some(stats) = cache.stats() {
            self.commit_stats(&stats);
        }
    }

    pub fn commit_stats(&mut self, stats: &BnStats) {
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&stats.var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }

    pub fn backward(&self, cache: &BnCache, grad_out: &Matrix, grads: &mut BatchNorm) -> Matrix {
        let (n, c) = grad_out.shape();
        let gamma = self.gamma.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for i in 0..n {
            for ((j, g), xh) in grad_out.row(i).iter().enumerate().zip(cache.xhat.row(i)) {
                dgamma[j] += g * xh;
                dbeta[j] += g;
            }
        }
        for (a, b) in grads.gamma.data_mut().iter_mut().zip(&dgamma) {
            *a += b;
        }
        for (a, b) in grads.beta.data_mut().iter_mut().zip(&dbeta) {
            *a += b;
        }
        let mut dx = Matrix::zeros(n, c);
        match cache.mode {
            Mode::Eval => {
                for i in 0..n {
                    let (g, out) = (grad_out.row(i), dx.row_mut(i));
                    for j in 0..c {
                        out[j] = g[j] * gamma[j] * cache.inv_std[j];
                    }
                }
            }
            Mode::Train => {
                // dxhat = g * gamma; sum(dxhat) = gamma * dbeta; sum(dxhat * xhat) = gamma * dgamma
                let nf = n as f64;
                for i in 0..n {
                    let (g, xh, out) = (grad_out.row(i), cache.xhat.row(i), dx.row_mut(i));
                    for j in 0..c {
                        let dxhat = g[j] * gamma[j];
                        out[j] = cache.inv_std[j] / nf
                            * (nf * dxhat - gamma[j] * dbeta[j] - xh[j] * gamma[j] * dgamma[j]);
                    }
                }
            }
        }
        dx
    }
}

/// Per-channel mean, biased and unbiased variance over the rows of `x`.
fn batch_stats(x: &Matrix) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (n, c) = x.shape();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let mut mean = x.col_sums();
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for i in 0..n {
        for ((v, xv), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            let d = xv - m;
            *v += d * d;
        }
    }
    let unbiased = var.iter().map(|v| v / (n - 1) as f64).collect();
    var.iter_mut().for_each(|v| *v /= n as f64);
    Ok((mean, var, unbiased))
}

impl Module for BatchNorm {
    fn params(&self) -> Vec<&Matrix> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn state(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        vec![
            (join_name(prefix, "gamma"), &self.gamma),
            (join_name(prefix, "beta"), &self.beta),
            (join_name(prefix, "running_mean"), &self.running_mean),
            (join_name(prefix, "running_var"), &self.running_var),
        ]
    }

    fn state_mut(&mut self, prefix: &str) -> Vec<(String, &mut Matrix)> {
        vec![
            (join_name(prefix, "gamma"), &mut self.gamma),
            (join_name(prefix, "beta"), &mut self.beta),
            (join_name(prefix, "running_mean"), &mut self.running_mean),
            (join_name(prefix, "running_var"), &mut self.running_var),
        ]
    }
}
