//! Mini-batch training of the tracking network with checkpoint and resume.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{make_training_samples, SampleBudgets, TrainingSample, Tracklet};
use crate::error::{Error, Result};
use crate::evm::{sample_training_centers, EvmTrainConfig, LossWeights};
use crate::model::{DmtModel, DmtNet, LossParts, ModelConfig, SampleResult};
use crate::nn::weights::{load_tensors, save_tensors};
use crate::nn::{Adam, Matrix, Module};
use crate::seed::{derive_seed, derive_seed2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub weights: LossWeights,
    pub evm: EvmTrainConfig,
    pub budgets: SampleBudgets,
    /// Frame pairs drawn per epoch; 0 uses every pair.
    pub pairs_per_epoch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch: 100,
            lr: 1e-3,
            lr_decay: 0.5,
            decay_every: 5,
            weights: LossWeights::default(),
            evm: EvmTrainConfig::default(),
            budgets: SampleBudgets::default(),
            pairs_per_epoch: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every.max(1)) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub samples: usize,
    pub loss: LossParts,
}

/// Network, optimizer state and epoch counter; everything a resumed run
/// needs to continue bit-for-bit.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: DmtNet,
    pub adam: Adam,
    pub epoch: usize,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        model_cfg.validate()?;
        if cfg.batch == 0 || cfg.evm.samples_per_frame == 0 {
            return Err(Error::Config("batch and samples per frame must be positive".into()));
        }
        let net = DmtNet::new(model_cfg, derive_seed(cfg.seed, 0));
        let adam = Adam::new(&net);
        Ok(Self {
            net,
            adam,
            epoch: 0,
            cfg,
        })
    }

    /// Frame pairs of one epoch, already shuffled and truncated.
    pub fn epoch_samples(&self, tracklets: &[Tracklet], epoch: usize) -> Vec<TrainingSample> {
        let base = derive_seed(self.cfg.seed, 1);
        let mut samples: Vec<TrainingSample> = tracklets
            .par_iter()
            .enumerate()
            .map(|(i, t)| make_training_samples(t, &self.cfg.budgets, derive_seed2(base, epoch as u64, i as u64)))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed2(self.cfg.seed, 2, epoch as u64));
        samples.shuffle(&mut rng);
        if self.cfg.pairs_per_epoch > 0 {
            samples.truncate(self.cfg.pairs_per_epoch);
        }
        samples
    }

    pub fn run_epoch(&mut self, tracklets: &[Tracklet]) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let samples = self.epoch_samples(tracklets, epoch);
        if samples.is_empty() {
            return Err(Error::Data("no usable training pairs".into()));
        }
        let lr = self.cfg.lr_at(epoch);
        let query_base = derive_seed2(self.cfg.seed, 3, epoch as u64);
        let mut total = LossParts::default();
        for (b, chunk) in samples.chunks(self.cfg.batch).enumerate() {
            let net = &self.net;
            let cfg = &self.cfg;
            let results: Vec<SampleResult> = chunk
                .par_iter()
                .enumerate()
                .map(|(j, s)| {
                    let seed = derive_seed2(query_base, b as u64, j as u64);
                    let queries = sample_training_centers(s.gt_center(), &cfg.evm, seed);
                    net.forward_backward(s, &queries, &cfg.weights)
                })
                .collect::<Result<_>>()?;
            let mut grads = self.net.zeros_like();
            for r in &results {
                grads.accumulate(&r.grads);
                total.add(&r.loss);
            }
            grads.scale_params(1.0 / chunk.len() as f64);
            self.adam.update(&mut self.net, &grads, lr);
            for r in &results {
                self.net.commit_stats(&r.stats);
            }
        }
        self.epoch += 1;
        Ok(EpochRecord {
            epoch,
            lr,
            samples: samples.len(),
            loss: total.scaled(1.0 / samples.len() as f64),
        })
    }

    /// Mean loss of the next epoch's pairs without updating anything.
    pub fn evaluate_next_epoch(&self, tracklets: &[Tracklet]) -> Result<LossParts> {
        let samples = self.epoch_samples(tracklets, self.epoch);
        let query_base = derive_seed2(self.cfg.seed, 3, self.epoch as u64);
        let losses: Vec<LossParts> = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let (b, j) = (i / self.cfg.batch, i % self.cfg.batch);
                let queries = sample_training_centers(s.gt_center(), &self.cfg.evm, derive_seed2(query_base, b as u64, j as u64));
                self.net.sample_loss(s, &queries, &self.cfg.weights)
            })
            .collect::<Result<_>>()?;
        let mut total = LossParts::default();
        losses.iter().for_each(|l| total.add(l));
        Ok(total.scaled(1.0 / losses.len().max(1) as f64))
    }

    pub fn save_checkpoint(&self, path: &Path, lstm: Option<&crate::motion::LstmMpm>) -> Result<()> {
        let mut tensors = DmtModel {
            net: Some(self.net.clone()),
            lstm: lstm.cloned(),
        }
        .tensors();
        tensors.extend(self.adam.tensors("adam"));
        tensors.push(("train.epoch".into(), Matrix::row_vector(&[self.epoch as f64])));
        save_tensors(path, tensors.iter().map(|(n, m)| (n.as_str(), m)))
    }

    /// Restores network, optimizer and epoch from a checkpoint. The
    /// configuration is taken from `cfg`, not from the file.
    pub fn resume(path: &Path, cfg: TrainConfig) -> Result<(Self, Option<crate::motion::LstmMpm>)> {
        let map = load_tensors(path)?;
        let model = DmtModel::from_tensors(&map)?;
        let net = model
            .net
            .ok_or_else(|| Error::Weights("checkpoint has no tracking network".into()))?;
        let mut adam = Adam::new(&net);
        adam.restore("adam", |n| map.get(n).cloned())?;
        let epoch = map
            .get("train.epoch")
            .and_then(|m| m.data().first().copied())
            .ok_or_else(|| Error::Weights("missing tensor train.epoch".into()))? as usize;
        Ok((
            Self {
                net,
                adam,
                epoch,
                cfg,
            },
            model.lstm,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::{generate_suite, SuiteConfig};

    fn small() -> (ModelConfig, TrainConfig, Vec<Tracklet>) {
        let model = ModelConfig {
            backbone: BackboneConfig {
                channels: 8,
                k: 2,
                radius: 0.6,
                max_neighbors: 4,
            },
            evm_hidden: 16,
        };
        let cfg = TrainConfig {
            epochs: 3,
            batch: 4,
            evm: EvmTrainConfig {
                samples_per_frame: 4,
                max_sample_dist: 0.75,
            },
            budgets: SampleBudgets {
                template_points: 16,
                search_points: 32,
                ..Default::default()
            },
            pairs_per_epoch: 8,
            seed: 5,
            ..Default::default()
        };
        let suite = SuiteConfig {
            frames: 4,
            ..Default::default()
        };
        (model, cfg, generate_suite(&suite, 4, 1, 0).unwrap())
    }

    #[test]
    fn lr_schedule_halves() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert_eq!(cfg.lr_at(4), 1e-3);
        assert_eq!(cfg.lr_at(5), 5e-4);
        assert_eq!(cfg.lr_at(12), 2.5e-4);
    }

    #[test]
    fn training_is_deterministic() {
        let (model, cfg, data) = small();
        let run = || {
            let mut t = Trainer::new(&model, cfg).unwrap();
            let recs: Vec<EpochRecord> = (0..2).map(|_| t.run_epoch(&data).unwrap()).collect();
            (t.net, recs)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra[0].samples, 8);
    }

    #[test]
    fn resume_reproduces_next_epoch() {
        let (model, cfg, data) = small();
        let mut t = Trainer::new(&model, cfg).unwrap();
        t.run_epoch(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.dmtw");
        t.save_checkpoint(&path, None).unwrap();
        let straight = t.run_epoch(&data).unwrap();
        let (mut resumed, lstm) = Trainer::resume(&path, cfg).unwrap();
        assert!(lstm.is_none());
        assert_eq!(resumed.epoch, 1);
        let again = resumed.run_epoch(&data).unwrap();
        assert!((straight.loss.total - again.loss.total).abs() <= 1e-9);
        assert_eq!(resumed.net, t.net);
    }
}
