//! Explicit voting: pool offset-augmented point features at a query center
//! and regress the box relative to that center.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{normalize_yaw, Box3D, BoxSize, Point3, PointCloud};
use crate::nn::activation::{relu_backward_in_place, relu_in_place};
use crate::nn::loss::{bce_with_logits, masked_smooth_l1, smooth_l1};
use crate::nn::pool::{max_pool_groups, max_pool_groups_backward};
use crate::nn::{BatchNorm, BnCache, BnStats, Dense, Matrix, Mode};

pub const EVM_HIDDEN: usize = 256;
pub const BOX_HEAD_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvmTrainConfig {
    pub samples_per_frame: usize,
    pub max_sample_dist: f64,
}

impl Default for EvmTrainConfig {
    fn default() -> Self {
        Self {
            samples_per_frame: 64,
            max_sample_dist: 0.75,
        }
    }
}

/// Voting perceptron `(C+3) -> H -> H -> C` followed by a max-pool over the
/// points, then the box head `C -> 128 -> 4` giving `(dx, dy, dz, yaw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evm {
    pub fc1: Dense,
    pub bn1: BatchNorm,
    pub fc2: Dense,
    pub bn2: BatchNorm,
    pub fc3: Dense,
    pub head1: Dense,
    pub head2: Dense,
}
crate::compose_module!(Evm { fc1, bn1, fc2, bn2, fc3, head1, head2 });

#[derive(Debug, Clone)]
pub struct EvmCache {
    points: usize,
    features: Matrix,
    offsets: Matrix,
    a1: Matrix,
    a2: Matrix,
    a3_rows: usize,
    bn1: BnCache,
    bn2: BnCache,
    argmax: Vec<usize>,
    pooled: Matrix,
    hidden: Matrix,
}

impl EvmCache {
    /// The pooled target feature for every query, one row each.
    pub fn pooled(&self) -> &Matrix {
        &self.pooled
    }

    pub fn bn_stats(&self) -> Vec<BnStats> {
        [&self.bn1, &self.bn2].into_iter().filter_map(BnCache::stats).collect()
    }
}

/// Training normalizes with the running statistics too: batch statistics
/// taken over the queries of one sample would reveal where the queries
/// were centered, which is the answer the head is asked for.
fn normalize(bn: &BatchNorm, x: &Matrix, mode: Mode) -> Result<(Matrix, BnCache)> {
    match mode {
        Mode::Train => bn.forward_frozen(x),
        Mode::Eval => bn.forward(x, Mode::Eval),
    }
}

impl Evm {
    pub fn new(channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Dense::new(channels + 3, hidden, rng),
            bn1: BatchNorm::new(hidden),
            fc2: Dense::new(hidden, hidden, rng),
            bn2: BatchNorm::new(hidden),
            fc3: Dense::new(hidden, channels, rng),
            head1: Dense::new(channels, BOX_HEAD_HIDDEN, rng),
            head2: Dense::new(BOX_HEAD_HIDDEN, 4, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.fc3.output_dim()
    }

    /// Query offsets and the first-layer pre-activations, `points` rows per query.
    fn first_layer(&self, features: &Matrix, coords: &PointCloud, queries: &[Point3]) -> Result<(Matrix, Matrix)> {
        let c = self.channels();
        let m = features.rows();
        if m == 0 {
            return Err(Error::EmptyCloud);
        }
        if coords.len() != m || features.cols() != c {
            return Err(Error::shape(
                "evm_forward",
                format!("{m} coords with {c} channels"),
                format!("{} coords with {} channels", coords.len(), features.cols()),
            ));
        }
        if queries.is_empty() {
            return Err(Error::EmptyInput);
        }
        let s = queries.len();
        let base = self.fc1.partial_forward(features, 0, true)?;
        let mut offsets = Matrix::zeros(s * m, 3);
        for (qi, q) in queries.iter().enumerate() {
            for (i, p) in coords.iter().enumerate() {
                offsets.row_mut(qi * m + i).copy_from_slice((q - p).as_slice());
            }
        }
        let mut z1 = self.fc1.partial_forward(&offsets, c, false)?;
        for r in 0..s * m {
            for (a, b) in z1.row_mut(r).iter_mut().zip(base.row(r % m)) {
                *a += b;
            }
        }
        Ok((offsets, z1))
    }

    /// Evaluates every query against the same point set. Returns one
    /// `(dx, dy, dz, yaw)` row per query.
    pub fn forward(
        &self,
        features: &Matrix,
        coords: &PointCloud,
        queries: &[Point3],
        mode: Mode,
    ) -> Result<(Matrix, EvmCache)> {
        let m = features.rows();
        let (offsets, z1) = self.first_layer(features, coords, queries)?;
        let (mut a1, bn1) = normalize(&self.bn1, &z1, mode)?;
        drop(z1);
        relu_in_place(&mut a1);
        let (mut a2, bn2) = normalize(&self.bn2, &self.fc2.forward(&a1)?, mode)?;
        relu_in_place(&mut a2);
        let a3 = self.fc3.forward(&a2)?;
        let (pooled, argmax) = max_pool_groups(&a3, m)?;
        let mut hidden = self.head1.forward(&pooled)?;
        relu_in_place(&mut hidden);
        let out = self.head2.forward(&hidden)?;
        Ok((
            out,
            EvmCache {
                points: m,
                features: features.clone(),
                offsets,
                a1,
                a2,
                a3_rows: a3.rows(),
                bn1,
                bn2,
                argmax,
                pooled,
                hidden,
            },
        ))
    }

    /// Eval-mode forward without the backward cache.
    pub fn infer(&self, features: &Matrix, coords: &PointCloud, queries: &[Point3]) -> Result<Matrix> {
        let m = features.rows();
        let (_, mut a1) = self.first_layer(features, coords, queries)?;
        self.bn1.infer_relu_in_place(&mut a1)?;
        let mut a2 = self.fc2.forward(&a1)?;
        drop(a1);
        self.bn2.infer_relu_in_place(&mut a2)?;
        let (pooled, _) = max_pool_groups(&self.fc3.forward(&a2)?, m)?;
        let mut hidden = self.head1.forward(&pooled)?;
        relu_in_place(&mut hidden);
        self.head2.forward(&hidden)
    }

    /// Pooled target feature for a single query.
    pub fn pooled_feature(&self, features: &Matrix, coords: &PointCloud, query: Point3, mode: Mode) -> Result<Vec<f64>> {
        let (_, cache) = self.forward(features, coords, &[query], mode)?;
        Ok(cache.pooled.into_data())
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the point features.
    pub fn backward(&self, cache: &EvmCache, grad: &Matrix, grads: &mut Evm) -> Result<Matrix> {
        let c = self.channels();
        let m = cache.points;
        let mut g = self.head2.backward(&cache.hidden, grad, &mut grads.head2)?;
        relu_backward_in_place(&cache.hidden, &mut g);
        let g = self.head1.backward(&cache.pooled, &g, &mut grads.head1)?;
        let g = max_pool_groups_backward(&g, &cache.argmax, cache.a3_rows);
        let mut g = self.fc3.backward(&cache.a2, &g, &mut grads.fc3)?;
        relu_backward_in_place(&cache.a2, &mut g);
        let g = self.bn2.backward(&cache.bn2, &g, &mut grads.bn2);
        let mut g = self.fc2.backward(&cache.a1, &g, &mut grads.fc2)?;
        relu_backward_in_place(&cache.a1, &mut g);
        let dz1 = self.bn1.backward(&cache.bn1, &g, &mut grads.bn1);
        self.fc1
            .partial_backward(&cache.offsets, c, false, &dz1, &mut grads.fc1, false)?;
        let mut dbase = Matrix::zeros(m, dz1.cols());
        for r in 0..dz1.rows() {
            for (a, b) in dbase.row_mut(r % m).iter_mut().zip(dz1.row(r)) {
                *a += b;
            }
        }
        Ok(self
            .fc1
            .partial_backward(&cache.features, 0, true, &dbase, &mut grads.fc1, true)?
            .expect("requested"))
    }

    pub fn commit(&mut self, cache: &EvmCache) {
        self.bn1.commit(&cache.bn1);
        self.bn2.commit(&cache.bn2);
    }

    /// Commits statistics taken from [`EvmCache::bn_stats`].
    pub fn commit_stats(&mut self, stats: &[BnStats]) {
        if let [s1, s2] = stats {
            self.bn1.commit_stats(s1);
            self.bn2.commit_stats(s2);
        }
    }

    pub fn macs(&self, points: usize, queries: usize) -> usize {
        let c = self.channels();
        let h = self.fc2.output_dim();
        points * c * h
            + queries * points * (3 * h + self.fc2.macs_per_row() + self.fc3.macs_per_row())
            + queries * (self.head1.macs_per_row() + self.head2.macs_per_row())
    }
}

/// Turns one `(dx, dy, dz, yaw)` head output into a box around `query`.
pub fn predict_box(output: &[f64], query: Point3, size: BoxSize) -> Result<Box3D> {
    if output.len() != 4 {
        return Err(Error::shape("predict_box", 4, output.len()));
    }
    let center = query + Point3::new(output[0], output[1], output[2]);
    Box3D::new(center, size, normalize_yaw(output[3]))
}

/// Uniform samples from the solid ball of radius `radius` around `center`.
pub fn sample_training_centers(center: Point3, cfg: &EvmTrainConfig, seed: u64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = cfg.max_sample_dist;
    (0..cfg.samples_per_frame)
        .map(|_| {
            if r <= 0.0 {
                return center;
            }
            loop {
                let d = Point3::new(
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                );
                if d.norm_squared() <= 1.0 {
                    return center + d * r;
                }
            }
        })
        .collect()
}

/// Box-head regression targets relative to each query.
pub fn box_targets(gt: &Box3D, queries: &[Point3]) -> Matrix {
    let mut t = Matrix::zeros(queries.len(), 4);
    for (r, q) in queries.iter().enumerate() {
        let d = gt.center() - q;
        t.row_mut(r).copy_from_slice(&[d.x, d.y, d.z, gt.yaw()]);
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 1.0,
            gamma: 0.2,
        }
    }
}

pub struct LossInputs<'a> {
    pub logits: &'a [f64],
    pub labels: &'a [bool],
    pub pred_bc: &'a Matrix,
    pub gt_bc: &'a Matrix,
    pub mask: &'a [bool],
    pub pred_box: &'a Matrix,
    pub gt_box: &'a Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub cls: f64,
    pub bc: f64,
    pub bbox: f64,
    pub grad_logits: Vec<f64>,
    pub grad_bc: Matrix,
    pub grad_box: Matrix,
}

/// Weighted sum of the classification, BoxCloud and box losses.
pub fn combined_loss(inp: &LossInputs, w: &LossWeights) -> Result<LossOutput> {
    let labels: Vec<f64> = inp.labels.iter().map(|&l| f64::from(u8::from(l))).collect();
    let (cls, mut grad_logits) = bce_with_logits(inp.logits, &labels)?;
    let (bc, mut grad_bc) = masked_smooth_l1(inp.pred_bc, inp.gt_bc, inp.mask)?;
    let (bbox, mut grad_box) = smooth_l1(inp.pred_box, inp.gt_box)?;
    grad_logits.iter_mut().for_each(|g| *g *= w.alpha);
    grad_bc.scale(w.beta);
    grad_box.scale(w.gamma);
    Ok(LossOutput {
        total: w.alpha * cls + w.beta * bc + w.gamma * bbox,
        cls,
        bc,
        bbox,
        grad_logits,
        grad_bc,
        grad_box,
    })
}
