//! Flat `key = value` run configuration with `#` comments. Every key has a
//! default, so an empty file is valid.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use dmt_core::backbone::BackboneConfig;
use dmt_core::data::{SampleBudgets, SuiteConfig};
use dmt_core::evm::{EvmTrainConfig, LossWeights};
use dmt_core::model::ModelConfig;
use dmt_core::motion::{LstmMpm, LstmTrainConfig, MpmParams, HISTORY_WINDOW, MPM_NAMES};
use dmt_core::seed::derive_seed;
use dmt_core::tracker::{TemplateStrategy, TrackMode, TrackerConfig};
use dmt_core::train::TrainConfig;
use dmt_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub margin: f64,
    pub jitter: f64,
    pub sample_dist: f64,
    pub samples: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub pairs_per_epoch: usize,
    pub lstm_hidden: usize,
    pub window: usize,
    pub lstm_epochs: usize,
    pub lstm_lr: f64,
    pub lstm_noise: f64,
    pub channels: usize,
    pub k: usize,
    pub radius: f64,
    pub max_neighbors: usize,
    pub evm_hidden: usize,
    pub template_points: usize,
    pub search_points: usize,
    pub template_strategy: TemplateStrategy,
    pub mpm: String,
    pub ridge_lambda: f64,
    pub gpr_length_scale: f64,
    pub gpr_noise: f64,
    pub ransac_iters: usize,
    pub ransac_thresh: f64,
    pub frames: usize,
    pub noise: f64,
    pub dropout: f64,
    pub distractors: usize,
    pub min_distractor_dist: f64,
    pub density_scale: f64,
    pub train_tracklets: usize,
    pub test_tracklets: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let lstm = LstmTrainConfig::default();
        let backbone = BackboneConfig::default();
        let tracker = TrackerConfig::default();
        let mpm = MpmParams::default();
        let suite = SuiteConfig::default();
        Self {
            seed: 0,
            alpha: train.weights.alpha,
            beta: train.weights.beta,
            gamma: train.weights.gamma,
            margin: train.budgets.margin,
            jitter: train.budgets.jitter,
            sample_dist: train.evm.max_sample_dist,
            samples: train.evm.samples_per_frame,
            epochs: train.epochs,
            batch: train.batch,
            lr: train.lr,
            lr_decay: train.lr_decay,
            lr_decay_every: train.decay_every,
            pairs_per_epoch: train.pairs_per_epoch,
            lstm_hidden: lstm.hidden,
            window: HISTORY_WINDOW,
            lstm_epochs: lstm.epochs,
            lstm_lr: lstm.lr,
            lstm_noise: lstm.input_noise,
            channels: backbone.channels,
            k: backbone.k,
            radius: backbone.radius,
            max_neighbors: backbone.max_neighbors,
            evm_hidden: ModelConfig::default().evm_hidden,
            template_points: tracker.template_points,
            search_points: tracker.search_points,
            template_strategy: tracker.template_strategy,
            mpm: "lstm".into(),
            ridge_lambda: mpm.ridge_lambda,
            gpr_length_scale: mpm.gpr_length_scale,
            gpr_noise: mpm.gpr_noise,
            ransac_iters: mpm.ransac_iters,
            ransac_thresh: mpm.ransac_thresh,
            frames: suite.frames,
            noise: suite.noise,
            dropout: suite.dropout,
            distractors: suite.distractors,
            min_distractor_dist: suite.min_distractor_dist,
            density_scale: suite.density_scale,
            train_tracklets: 200,
            test_tracklets: 50,
        }
    }
}

fn bad(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {msg}"))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| bad(key, format!("cannot parse {value:?}: {e}")))
}

fn require(key: &str, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(bad(key, format!("must be {what}")))
    }
}

fn positive(key: &str, value: &str) -> Result<f64> {
    let v: f64 = parse(key, value)?;
    require(key, v.is_finite() && v > 0.0, "positive")?;
    Ok(v)
}

fn non_negative(key: &str, value: &str) -> Result<f64> {
    let v: f64 = parse(key, value)?;
    require(key, v.is_finite() && v >= 0.0, "non-negative")?;
    Ok(v)
}

fn at_least(key: &str, value: &str, min: usize) -> Result<usize> {
    let v: usize = parse(key, value)?;
    require(key, v >= min, &format!("at least {min}"))?;
    Ok(v)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(bad(key, format!("set twice (line {})", i + 1)));
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Config(format!("{}:{line}: {msg}", path.display())),
            e => e,
        })
    }

    /// Defaults when `path` is `None`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "alpha" => self.alpha = non_negative(key, value)?,
            "beta" => self.beta = non_negative(key, value)?,
            "gamma" => self.gamma = non_negative(key, value)?,
            "margin" => self.margin = positive(key, value)?,
            "jitter" => self.jitter = non_negative(key, value)?,
            "sample_dist" => self.sample_dist = positive(key, value)?,
            "samples" => self.samples = at_least(key, value, 1)?,
            "epochs" => self.epochs = at_least(key, value, 1)?,
            "batch" => self.batch = at_least(key, value, 1)?,
            "lr" => self.lr = positive(key, value)?,
            "lr_decay" => {
                let v = positive(key, value)?;
                require(key, v <= 1.0, "in (0, 1]")?;
                self.lr_decay = v;
            }
            "lr_decay_every" => self.lr_decay_every = at_least(key, value, 1)?,
            "pairs_per_epoch" => self.pairs_per_epoch = parse(key, value)?,
            "lstm_hidden" => self.lstm_hidden = at_least(key, value, 1)?,
            "window" => {
                let v: usize = parse(key, value)?;
                require(key, v == HISTORY_WINDOW, &format!("{HISTORY_WINDOW}"))?;
                self.window = v;
            }
            "lstm_epochs" => self.lstm_epochs = at_least(key, value, 1)?,
            "lstm_lr" => self.lstm_lr = positive(key, value)?,
            "lstm_noise" => self.lstm_noise = non_negative(key, value)?,
            "channels" => self.channels = at_least(key, value, 1)?,
            "k" => self.k = at_least(key, value, 1)?,
            "radius" => self.radius = positive(key, value)?,
            "max_neighbors" => self.max_neighbors = at_least(key, value, 1)?,
            "evm_hidden" => self.evm_hidden = at_least(key, value, 1)?,
            "template_points" => self.template_points = at_least(key, value, 1)?,
            "search_points" => self.search_points = at_least(key, value, 1)?,
            "template_strategy" => {
                self.template_strategy = TemplateStrategy::parse(value).ok_or_else(|| {
                    let names: Vec<&str> = TemplateStrategy::ALL.iter().map(|s| s.name()).collect();
                    bad(key, format!("must be one of {}", names.join(", ")))
                })?
            }
            "mpm" => {
                require(key, MPM_NAMES.contains(&value), &format!("one of {}", MPM_NAMES.join(", ")))?;
                self.mpm = value.to_string();
            }
            "ridge_lambda" => self.ridge_lambda = non_negative(key, value)?,
            "gpr_length_scale" => self.gpr_length_scale = positive(key, value)?,
            "gpr_noise" => self.gpr_noise = positive(key, value)?,
            "ransac_iters" => self.ransac_iters = at_least(key, value, 1)?,
            "ransac_thresh" => self.ransac_thresh = positive(key, value)?,
            "frames" => self.frames = at_least(key, value, 2)?,
            "noise" => self.noise = non_negative(key, value)?,
            "dropout" => {
                let v = non_negative(key, value)?;
                require(key, v < 1.0, "in [0, 1)")?;
                self.dropout = v;
            }
            "distractors" => self.distractors = parse(key, value)?,
            "min_distractor_dist" => self.min_distractor_dist = positive(key, value)?,
            "density_scale" => self.density_scale = positive(key, value)?,
            "train_tracklets" => self.train_tracklets = at_least(key, value, 1)?,
            "test_tracklets" => self.test_tracklets = at_least(key, value, 1)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                channels: self.channels,
                k: self.k,
                radius: self.radius,
                max_neighbors: self.max_neighbors,
            },
            evm_hidden: self.evm_hidden,
        }
    }

    pub fn budgets(&self) -> SampleBudgets {
        SampleBudgets {
            template_points: self.template_points,
            search_points: self.search_points,
            margin: self.margin,
            jitter: self.jitter,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            lr_decay: self.lr_decay,
            decay_every: self.lr_decay_every,
            weights: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
            },
            evm: EvmTrainConfig {
                samples_per_frame: self.samples,
                max_sample_dist: self.sample_dist,
            },
            budgets: self.budgets(),
            pairs_per_epoch: self.pairs_per_epoch,
            seed: self.seed,
        }
    }

    pub fn lstm(&self) -> LstmTrainConfig {
        LstmTrainConfig {
            epochs: self.lstm_epochs,
            lr: self.lstm_lr,
            hidden: self.lstm_hidden,
            input_noise: self.lstm_noise,
            seed: derive_seed(self.seed, 7),
        }
    }

    pub fn mpm_params(&self) -> MpmParams {
        MpmParams {
            ridge_lambda: self.ridge_lambda,
            gpr_length_scale: self.gpr_length_scale,
            gpr_noise: self.gpr_noise,
            ransac_iters: self.ransac_iters,
            ransac_thresh: self.ransac_thresh,
            seed: self.seed,
        }
    }

    /// Tracker settings; the configured MPM must be buildable from `lstm`.
    pub fn tracker(&self, lstm: Option<&LstmMpm>, mode: TrackMode) -> Result<TrackerConfig> {
        let cfg = TrackerConfig {
            search_margin: self.margin,
            template_strategy: self.template_strategy,
            mpm: self.mpm_params().build(&self.mpm, lstm)?,
            template_points: self.template_points,
            search_points: self.search_points,
            mode,
            seed: self.seed,
        };
        cfg.validate(self.k)?;
        Ok(cfg)
    }

    pub fn suite(&self) -> SuiteConfig {
        SuiteConfig {
            frames: self.frames,
            noise: self.noise,
            dropout: self.dropout,
            distractors: self.distractors,
            min_distractor_dist: self.min_distractor_dist,
            density_scale: self.density_scale,
        }
    }
}
