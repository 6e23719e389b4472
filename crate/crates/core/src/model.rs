//! The complete tracking network and its persistence.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    boxcloud_matrix, BackboneConfig, Baff, BaffInputs, FeatureCloud, PointEncoder, PointHead,
};
use crate::data::TrainingSample;
use crate::error::{Error, Result};
use crate::evm::{box_targets, combined_loss, Evm, LossInputs, LossWeights, EVM_HIDDEN};
use crate::geometry::{box_cloud, Box3D, BoxSize, Point3, PointCloud};
use crate::motion::LstmMpm;
use crate::nn::weights::{load_module, load_tensors, save_tensors, TensorMap};
use crate::nn::{BnStats, Matrix, Mode, Module};

pub const HEAD_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub evm_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            evm_hidden: EVM_HIDDEN,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.channels == 0 || b.k == 0 || b.max_neighbors == 0 || self.evm_hidden == 0 {
            return Err(Error::Config("layer widths, k and neighbor cap must be positive".into()));
        }
        if !(b.radius > 0.0) {
            return Err(Error::Config("grouping radius must be positive".into()));
        }
        Ok(())
    }
}

/// Shared encoder for template and search, BoxCloud head, fusion,
/// classifier and voting module.
#[derive(Debug, Clone, PartialEq)]
pub struct DmtNet {
    pub encoder: PointEncoder,
    pub bc_head: PointHead,
    pub baff: Baff,
    pub classifier: PointHead,
    pub evm: Evm,
}
crate::compose_module!(DmtNet { encoder, bc_head, baff, classifier, evm });

/// Encoded template with its BoxCloud rows in encoder order.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateFeatures {
    pub cloud: FeatureCloud,
    pub boxcloud: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// `(dx, dy, dz, yaw)` relative to the query.
    pub output: [f64; 4],
    pub search: FeatureCloud,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub bc: f64,
    pub bbox: f64,
}

impl LossParts {
    pub fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.cls += o.cls;
        self.bc += o.bc;
        self.bbox += o.bbox;
    }

    pub fn scaled(&self, s: f64) -> LossParts {
        LossParts {
            total: self.total * s,
            cls: self.cls * s,
            bc: self.bc * s,
            bbox: self.bbox * s,
        }
    }
}

/// Gradients, loss and batch-norm statistics of one training sample.
#[derive(Debug, Clone)]
pub struct SampleResult {
    pub grads: DmtNet,
    pub loss: LossParts,
    pub stats: Vec<BnStats>,
}

impl DmtNet {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.backbone.channels;
        Self {
            encoder: PointEncoder::new(&cfg.backbone, &mut rng),
            bc_head: PointHead::new(c, HEAD_HIDDEN, 9, &mut rng),
            baff: Baff::new(c, cfg.backbone.k, &mut rng),
            classifier: PointHead::new(c, HEAD_HIDDEN, 1, &mut rng),
            evm: Evm::new(c, cfg.evm_hidden, &mut rng),
        }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                channels: self.encoder.channels(),
                k: self.baff.k,
                radius: self.encoder.radius,
                max_neighbors: self.encoder.max_neighbors,
            },
            evm_hidden: self.evm.fc2.output_dim(),
        }
    }

    pub fn encode_template(&self, template: &PointCloud, size: BoxSize) -> Result<TemplateFeatures> {
        if template.len() < self.baff.k {
            return Err(Error::TemplateTooSmall {
                got: template.len(),
                k: self.baff.k,
            });
        }
        let cloud = self.encoder.infer(template)?;
        let boxcloud = boxcloud_matrix(&box_cloud(&cloud.coords, &Box3D::at_origin(size)?));
        Ok(TemplateFeatures { cloud, boxcloud })
    }

    /// Inference on a search cloud already expressed in the reference frame.
    pub fn infer(&self, template: &TemplateFeatures, search: &PointCloud, query: Point3) -> Result<Inference> {
        let fs = self.encoder.infer(search)?;
        let pred_bc = self.bc_head.infer(&fs.features)?;
        let (fused, _) = self.baff.forward(&BaffInputs {
            search_features: &fs.features,
            search_bc: &pred_bc,
            template_features: &template.cloud.features,
            template_coords: &template.cloud.coords,
            template_bc: &template.boxcloud,
        })?;
        let out = self.evm.infer(&fused, &fs.coords, &[query])?;
        let o = out.row(0);
        Ok(Inference {
            output: [o[0], o[1], o[2], o[3]],
            search: fs,
        })
    }

    /// Per-point on-target logits for a search cloud, in encoder order.
    pub fn classify(&self, template: &TemplateFeatures, search: &PointCloud) -> Result<(FeatureCloud, Vec<f64>)> {
        let fs = self.encoder.infer(search)?;
        let pred_bc = self.bc_head.infer(&fs.features)?;
        let (fused, _) = self.baff.forward(&BaffInputs {
            search_features: &fs.features,
            search_bc: &pred_bc,
            template_features: &template.cloud.features,
            template_coords: &template.cloud.coords,
            template_bc: &template.boxcloud,
        })?;
        let logits = self.classifier.infer(&fused)?;
        Ok((fs, logits.into_data()))
    }

    /// Multiply-accumulates of one tracking step, template encoding included.
    pub fn step_macs(&self, search: usize, template: usize) -> usize {
        self.encoder.macs(search)
            + self.encoder.macs(template)
            + self.bc_head.macs(search)
            + self.baff.macs(search, template)
            + self.evm.macs(search, 1)
    }

    fn sample_forward(
        &self,
        s: &TrainingSample,
        queries: &[Point3],
        w: &LossWeights,
        need_grads: bool,
    ) -> Result<(LossParts, Option<SampleResult>)> {
        let (ft, ct) = self.encoder.encode(&s.template, Mode::Train)?;
        let (fs, cs) = self.encoder.encode(&s.search, Mode::Train)?;
        let tbc = boxcloud_matrix(&s.template_bc.gather(&ft.source));
        let (pred_bc, hb) = self.bc_head.forward(&fs.features, Mode::Train)?;
        let (fused, cb) = self.baff.forward(&BaffInputs {
            search_features: &fs.features,
            search_bc: &pred_bc,
            template_features: &ft.features,
            template_coords: &ft.coords,
            template_bc: &tbc,
        })?;
        let (logits, hc) = self.classifier.forward(&fused, Mode::Train)?;
        let (pred_box, ce) = self.evm.forward(&fused, &fs.coords, queries, Mode::Train)?;
        let labels: Vec<bool> = fs.source.iter().map(|&i| s.labels[i]).collect();
        let gt_bc = boxcloud_matrix(&s.gt_bc.gather(&fs.source));
        let gt_box = box_targets(&s.gt_box, queries);
        let loss = combined_loss(
            &LossInputs {
                logits: logits.data(),
                labels: &labels,
                pred_bc: &pred_bc,
                gt_bc: &gt_bc,
                mask: &labels,
                pred_box: &pred_box,
                gt_box: &gt_box,
            },
            w,
        )?;
        let parts = LossParts {
            total: loss.total,
            cls: loss.cls,
            bc: loss.bc,
            bbox: loss.bbox,
        };
        if !parts.total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        if !need_grads {
            return Ok((parts, None));
        }
        let mut grads = self.zeros_like();
        let mut dfused = self.evm.backward(&ce, &loss.grad_box, &mut grads.evm)?;
        let glogits = Matrix::from_vec(loss.grad_logits.len(), 1, loss.grad_logits)?;
        dfused.add_assign(&self.classifier.backward(&fused, &hc, &glogits, &mut grads.classifier)?);
        let (mut ds, dt) = self.baff.backward(&cb, &dfused, &mut grads.baff)?;
        ds.add_assign(&self.bc_head.backward(&fs.features, &hb, &loss.grad_bc, &mut grads.bc_head)?);
        self.encoder.backward(&cs, &ds, &mut grads.encoder)?;
        self.encoder.backward(&ct, &dt, &mut grads.encoder)?;
        let mut stats = ct.bn_stats();
        stats.extend(cs.bn_stats());
        stats.extend(hb.bn_stats());
        stats.extend(hc.bn_stats());
        stats.extend(ce.bn_stats());
        Ok((parts, Some(SampleResult { grads, loss: parts, stats })))
    }

    /// Training-mode loss of one sample evaluated at `queries`.
    pub fn sample_loss(&self, s: &TrainingSample, queries: &[Point3], w: &LossWeights) -> Result<LossParts> {
        Ok(self.sample_forward(s, queries, w, false)?.0)
    }

    pub fn forward_backward(&self, s: &TrainingSample, queries: &[Point3], w: &LossWeights) -> Result<SampleResult> {
        Ok(self.sample_forward(s, queries, w, true)?.1.expect("gradients requested"))
    }

    /// Folds statistics from [`DmtNet::forward_backward`] into the running
    /// estimates, in the order they were produced.
    pub fn commit_stats(&mut self, stats: &[BnStats]) {
        if stats.len() != 8 {
            return;
        }
        self.encoder.commit_stats(&stats[0..2]);
        self.encoder.commit_stats(&stats[2..4]);
        self.bc_head.bn.commit_stats(&stats[4]);
        self.classifier.bn.commit_stats(&stats[5]);
        self.evm.commit_stats(&stats[6..8]);
    }
}

/// Trained network plus the optional learned motion model.
#[derive(Debug, Clone, PartialEq)]
pub struct DmtModel {
    /// Absent in files written by LSTM-only training.
    pub net: Option<DmtNet>,
    pub lstm: Option<LstmMpm>,
}

impl DmtModel {
    pub fn net(&self) -> Result<&DmtNet> {
        self.net
            .as_ref()
            .ok_or_else(|| Error::Config("model file has no tracking network".into()))
    }

    pub fn tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        if let Some(net) = &self.net {
            let cfg = net.config();
            let b = &cfg.backbone;
            out.push((
                "meta.arch".to_string(),
                Matrix::row_vector(&[
                    b.channels as f64,
                    b.k as f64,
                    b.radius,
                    b.max_neighbors as f64,
                    cfg.evm_hidden as f64,
                ]),
            ));
            out.extend(net.state("net").into_iter().map(|(n, m)| (n, m.clone())));
        }
        if let Some(lstm) = &self.lstm {
            out.push((
                "meta.lstm".into(),
                Matrix::row_vector(&[lstm.lstm.hidden() as f64]),
            ));
            out.extend(lstm.state("mpm").into_iter().map(|(n, m)| (n, m.clone())));
        }
        out
    }

    pub fn from_tensors(map: &TensorMap) -> Result<Self> {
        let net = match map.get("meta.arch") {
            Some(arch) => {
                if arch.cols() != 5 {
                    return Err(Error::Weights("malformed architecture record".into()));
                }
                let arch = arch.data();
                let cfg = ModelConfig {
                    backbone: BackboneConfig {
                        channels: arch[0] as usize,
                        k: arch[1] as usize,
                        radius: arch[2],
                        max_neighbors: arch[3] as usize,
                    },
                    evm_hidden: arch[4] as usize,
                };
                cfg.validate()?;
                let mut net = DmtNet::new(&cfg, 0);
                load_module(&mut net, "net", map)?;
                Some(net)
            }
            None => None,
        };
        let lstm = match map.get("meta.lstm") {
            Some(h) => {
                let mut l = LstmMpm::zeros(h.data().first().copied().unwrap_or(0.0) as usize);
                load_module(&mut l, "mpm", map)?;
                Some(l)
            }
            None => None,
        };
        Ok(Self { net, lstm })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let t = self.tensors();
        save_tensors(path, t.iter().map(|(n, m)| (n.as_str(), m)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&load_tensors(path)?)
    }
}
