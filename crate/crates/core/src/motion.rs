//! Motion prediction: next-center estimates from the recent center history.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::nn::loss::mse;
use crate::nn::{Adam, Dense, Lstm, LstmCache, Matrix, Module};

pub const HISTORY_WINDOW: usize = 10;
/// Displacement scale for LSTM inputs and outputs, in meters.
pub const MAX_DISP_NORM: f64 = 5.0;

/// Most recent centers, oldest first, capped at [`HISTORY_WINDOW`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateHistory {
    centers: VecDeque<Point3>,
}

impl StateHistory {
    pub fn new(first: Point3) -> Self {
        Self {
            centers: VecDeque::from([first]),
        }
    }

    pub fn from_centers(centers: &[Point3]) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::EmptyHistory);
        }
        let skip = centers.len().saturating_sub(HISTORY_WINDOW);
        Ok(Self {
            centers: centers[skip..].iter().copied().collect(),
        })
    }

    pub fn push(&mut self, c: Point3) {
        if self.centers.len() == HISTORY_WINDOW {
            self.centers.pop_front();
        }
        self.centers.push_back(c);
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn last(&self) -> Point3 {
        *self.centers.back().expect("history is never empty")
    }

    pub fn centers(&self) -> Vec<Point3> {
        self.centers.iter().copied().collect()
    }
}

/// LSTM over scaled displacements to the last center, with a linear head
/// predicting the next scaled displacement.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmMpm {
    pub lstm: Lstm,
    pub head: Dense,
}
crate::compose_module!(LstmMpm { lstm, head });

#[derive(Debug, Clone, PartialEq)]
pub enum MpmConfig {
    ConstVel,
    Linear,
    Ridge { lambda: f64 },
    Gpr { length_scale: f64, noise: f64 },
    RansacRidge { iters: usize, inlier_thresh: f64, lambda: f64, seed: u64 },
    Lstm(Box<LstmMpm>),
}

impl MpmConfig {
    pub fn ridge() -> Self {
        Self::Ridge { lambda: 1e-2 }
    }

    pub fn gpr() -> Self {
        Self::Gpr {
            length_scale: 5.0,
            noise: 1e-2,
        }
    }

    pub fn ransac() -> Self {
        Self::RansacRidge {
            iters: 50,
            inlier_thresh: 0.2,
            lambda: 1e-2,
            seed: 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::ConstVel => "const-vel",
            Self::Linear => "linear",
            Self::Ridge { .. } => "ridge",
            Self::Gpr { .. } => "gpr",
            Self::RansacRidge { .. } => "ransac",
            Self::Lstm(_) => "lstm",
        }
    }

    fn min_history(&self) -> usize {
        match self {
            Self::ConstVel | Self::Linear | Self::Ridge { .. } => 2,
            Self::Gpr { .. } => 1,
            Self::RansacRidge { .. } => 3,
            Self::Lstm(_) => HISTORY_WINDOW,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{} requires {what}", self.name())));
        match *self {
            Self::Ridge { lambda } if !(lambda >= 0.0) => bad("lambda >= 0"),
            Self::Gpr { length_scale, noise } if !(length_scale > 0.0 && noise > 0.0) => {
                bad("positive length scale and noise")
            }
            Self::RansacRidge {
                iters,
                inlier_thresh,
                lambda,
                ..
            } if iters == 0 || !(inlier_thresh > 0.0) || !(lambda >= 0.0) => {
                bad("iters >= 1, inlier threshold > 0 and lambda >= 0")
            }
            _ => Ok(()),
        }
    }
}

/// Hyperparameters of the regression-based variants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpmParams {
    pub ridge_lambda: f64,
    pub gpr_length_scale: f64,
    pub gpr_noise: f64,
    pub ransac_iters: usize,
    pub ransac_thresh: f64,
    pub seed: u64,
}

impl Default for MpmParams {
    fn default() -> Self {
        Self {
            ridge_lambda: 1e-2,
            gpr_length_scale: 5.0,
            gpr_noise: 1e-2,
            ransac_iters: 50,
            ransac_thresh: 0.2,
            seed: 0,
        }
    }
}

impl MpmParams {
    /// Builds the variant called `name`; `lstm` is required for "lstm".
    pub fn build(&self, name: &str, lstm: Option<&LstmMpm>) -> Result<MpmConfig> {
        let cfg = match name {
            "const-vel" => MpmConfig::ConstVel,
            "linear" => MpmConfig::Linear,
            "ridge" => MpmConfig::Ridge {
                lambda: self.ridge_lambda,
            },
            "gpr" => MpmConfig::Gpr {
                length_scale: self.gpr_length_scale,
                noise: self.gpr_noise,
            },
            "ransac" => MpmConfig::RansacRidge {
                iters: self.ransac_iters,
                inlier_thresh: self.ransac_thresh,
                lambda: self.ridge_lambda,
                seed: self.seed,
            },
            "lstm" => MpmConfig::Lstm(Box::new(
                lstm.ok_or_else(|| Error::Config("mpm = lstm needs a model with a trained LSTM".into()))?
                    .clone(),
            )),
            other => return Err(Error::Config(format!("unknown mpm variant {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every variant, with the LSTM last when one is supplied.
    pub fn variants(&self, lstm: Option<&LstmMpm>) -> Result<Vec<MpmConfig>> {
        let mut names = MPM_NAMES[..5].to_vec();
        if lstm.is_some() {
            names.push("lstm");
        }
        names.iter().map(|n| self.build(n, lstm)).collect()
    }
}

pub const MPM_NAMES: [&str; 6] = ["const-vel", "linear", "ridge", "gpr", "ransac", "lstm"];

/// Keeps the last [`HISTORY_WINDOW`] entries and left-pads with the earliest
/// one up to `min`.
pub fn pad_history(history: &[Point3], min: usize) -> Result<Vec<Point3>> {
    let first = *history.first().ok_or(Error::EmptyHistory)?;
    let tail = &history[history.len().saturating_sub(HISTORY_WINDOW)..];
    let mut out = vec![first; min.saturating_sub(tail.len())];
    out.extend_from_slice(tail);
    Ok(out)
}

fn const_vel(h: &[Point3]) -> Point3 {
    let n = h.len();
    if n < 2 {
        return h[n - 1];
    }
    2.0 * h[n - 1] - h[n - 2]
}

/// Per-axis ridge fit on `(t, y)` with an unpenalized intercept, evaluated at
/// `at`. `None` when the normal equations are singular.
fn ridge_fit(ts: &[f64], ys: &[Point3], lambda: f64, at: f64) -> Option<Point3> {
    let n = ts.len() as f64;
    let tm = ts.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<Point3>() / n;
    let sxx: f64 = ts.iter().map(|t| (t - tm) * (t - tm)).sum::<f64>() + lambda;
    if sxx <= 1e-12 {
        return None;
    }
    let sxy: Point3 = ts.iter().zip(ys).map(|(t, y)| (t - tm) * (y - ym)).sum();
    Some(ym + sxy / sxx * (at - tm))
}

fn frame_times(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64).collect()
}

fn gpr(h: &[Point3], length_scale: f64, noise: f64) -> Option<Point3> {
    let n = h.len();
    let kern = |a: f64, b: f64| (-(a - b) * (a - b) / (2.0 * length_scale * length_scale)).exp();
    let k = DMatrix::from_fn(n, n, |i, j| {
        kern(i as f64, j as f64) + if i == j { noise * noise } else { 0.0 }
    });
    let chol = k.cholesky()?;
    let kstar = DVector::from_fn(n, |i, _| kern(i as f64, n as f64));
    let mean = h.iter().sum::<Point3>() / n as f64;
    let mut out = mean;
    for axis in 0..3 {
        let y = DVector::from_fn(n, |i, _| h[i][axis] - mean[axis]);
        out[axis] += kstar.dot(&chol.solve(&y));
    }
    Some(out)
}

fn ransac(h: &[Point3], iters: usize, thresh: f64, lambda: f64, seed: u64) -> Option<Point3> {
    let n = h.len();
    let ts = frame_times(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..iters {
        let mut subset = index::sample(&mut rng, n, 3).into_vec();
        subset.sort_unstable();
        let sub_t: Vec<f64> = subset.iter().map(|&i| ts[i]).collect();
        let sub_y: Vec<Point3> = subset.iter().map(|&i| h[i]).collect();
        let fit_at = |t: f64| ridge_fit(&sub_t, &sub_y, lambda, t);
        if fit_at(0.0).is_none() {
            continue;
        }
        let inliers: Vec<usize> = (0..n)
            .filter(|&i| fit_at(ts[i]).is_some_and(|p| (p - h[i]).norm() <= thresh))
            .collect();
        if inliers.len() > best.len() {
            best = inliers;
        }
    }
    if best.len() < 2 {
        return None;
    }
    let bt: Vec<f64> = best.iter().map(|&i| ts[i]).collect();
    let by: Vec<Point3> = best.iter().map(|&i| h[i]).collect();
    ridge_fit(&bt, &by, lambda, n as f64)
}

/// Next-center estimate. Every variant falls back to constant velocity when
/// its fit is degenerate, so the result is finite for finite input.
pub fn predict(history: &[Point3], cfg: &MpmConfig) -> Result<Point3> {
    let h = pad_history(history, cfg.min_history())?;
    let n = h.len();
    let fitted = match cfg {
        MpmConfig::ConstVel => Some(const_vel(&h)),
        MpmConfig::Linear => ridge_fit(&frame_times(n), &h, 0.0, n as f64),
        MpmConfig::Ridge { lambda } => ridge_fit(&frame_times(n), &h, *lambda, n as f64),
        MpmConfig::Gpr { length_scale, noise } => gpr(&h, *length_scale, *noise),
        MpmConfig::RansacRidge {
            iters,
            inlier_thresh,
            lambda,
            seed,
        } => ransac(&h, *iters, *inlier_thresh, *lambda, *seed),
        MpmConfig::Lstm(net) => Some(net.predict(&h)?),
    };
    Ok(fitted
        .filter(|p| p.iter().all(|v| v.is_finite()))
        .unwrap_or_else(|| const_vel(&h)))
}

/// One `(10-center window, next center)` training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterPair {
    pub window: [Point3; HISTORY_WINDOW],
    pub target: Point3,
}

pub struct LstmBatchCache {
    seq: LstmCache,
    last_hidden: Matrix,
}

impl LstmMpm {
    pub fn new(hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            lstm: Lstm::new(3, hidden, rng),
            head: Dense::new(hidden, 3, rng),
        }
    }

    pub fn zeros(hidden: usize) -> Self {
        Self {
            lstm: Lstm::zeros(3, hidden),
            head: Dense::zeros(hidden, 3),
        }
    }

    fn inputs(windows: &[[Point3; HISTORY_WINDOW]]) -> Vec<Matrix> {
        (0..HISTORY_WINDOW)
            .map(|t| {
                let mut x = Matrix::zeros(windows.len(), 3);
                for (b, w) in windows.iter().enumerate() {
                    let d = (w[t] - w[HISTORY_WINDOW - 1]) / MAX_DISP_NORM;
                    x.row_mut(b).copy_from_slice(d.as_slice());
                }
                x
            })
            .collect()
    }

    /// Scaled next displacements, one row per window.
    pub fn forward(&self, windows: &[[Point3; HISTORY_WINDOW]]) -> Result<(Matrix, LstmBatchCache)> {
        let (hs, seq) = self.lstm.forward(&Self::inputs(windows))?;
        let last_hidden = hs.into_iter().last().expect("window is non-empty");
        let out = self.head.forward(&last_hidden)?;
        Ok((out, LstmBatchCache { seq, last_hidden }))
    }

    pub fn backward(&self, cache: &LstmBatchCache, grad: &Matrix, grads: &mut LstmMpm) -> Result<()> {
        let gh = self.head.backward(&cache.last_hidden, grad, &mut grads.head)?;
        let mut grad_hs = vec![Matrix::zeros(gh.rows(), gh.cols()); HISTORY_WINDOW];
        grad_hs[HISTORY_WINDOW - 1] = gh;
        self.lstm.backward(&cache.seq, &grad_hs, &mut grads.lstm)?;
        Ok(())
    }

    pub fn predict(&self, history: &[Point3]) -> Result<Point3> {
        let h = pad_history(history, HISTORY_WINDOW)?;
        let window: [Point3; HISTORY_WINDOW] = h.try_into().expect("padded to the window");
        let (out, _) = self.forward(std::slice::from_ref(&window))?;
        let d = Point3::new(out.get(0, 0), out.get(0, 1), out.get(0, 2));
        Ok(window[HISTORY_WINDOW - 1] + d * MAX_DISP_NORM)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    /// Standard deviation of the Gaussian noise added to every window center,
    /// redrawn each epoch, so the model sees histories as imperfect as
    /// tracked ones.
    pub input_noise: f64,
    pub seed: u64,
}

impl Default for LstmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8000,
            lr: 1e-3,
            hidden: 50,
            input_noise: 0.02,
            seed: 0,
        }
    }
}

/// Full-batch Adam on scaled next-displacement regression. Returns the model
/// and the loss of every epoch.
pub fn train_lstm(pairs: &[CenterPair], cfg: &LstmTrainConfig) -> Result<(LstmMpm, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::InsufficientTrackletLength {
            needed: HISTORY_WINDOW + 1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = LstmMpm::new(cfg.hidden, &mut rng);
    let noise = Normal::new(0.0, cfg.input_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let draw = |rng: &mut ChaCha8Rng| {
        let mut windows = Vec::with_capacity(pairs.len());
        let mut target = Matrix::zeros(pairs.len(), 3);
        for (b, p) in pairs.iter().enumerate() {
            let mut w = p.window;
            if cfg.input_noise > 0.0 {
                for c in &mut w {
                    *c += Point3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
                }
            }
            let d = (p.target - w[HISTORY_WINDOW - 1]) / MAX_DISP_NORM;
            target.row_mut(b).copy_from_slice(d.as_slice());
            windows.push(w);
        }
        (windows, target)
    };
    let mut adam = Adam::new(&model);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let (mut windows, mut target) = draw(&mut rng);
    for _ in 0..cfg.epochs {
        if cfg.input_noise > 0.0 {
            (windows, target) = draw(&mut rng);
        }
        let (out, cache) = model.forward(&windows)?;
        let (loss, grad) = mse(&out, &target)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("lstm training loss".into()));
        }
        let mut grads = model.zeros_like();
        model.backward(&cache, &grad, &mut grads)?;
        adam.update(&mut model, &grads, cfg.lr);
        losses.push(loss);
    }
    Ok((model, losses))
}
