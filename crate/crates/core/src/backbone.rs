//! Point encoder, BoxCloud regression head, box-aware feature fusion and the
//! per-point classifier.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{BoxCloudCoords, PointCloud};
use crate::nn::activation::{relu_backward_in_place, relu_in_place};
use crate::nn::pool::{max_pool_groups, max_pool_groups_backward};
use crate::nn::{BatchNorm, BnCache, BnStats, Dense, Matrix, Mode};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    pub channels: usize,
    pub k: usize,
    pub radius: f64,
    pub max_neighbors: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            k: 4,
            radius: 0.6,
            max_neighbors: 16,
        }
    }
}

/// Seed points with learned features. `source[i]` is the index of seed `i`
/// in the cloud it was encoded from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCloud {
    pub coords: PointCloud,
    pub features: Matrix,
    pub source: Vec<usize>,
}

impl FeatureCloud {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

pub fn boxcloud_matrix(bc: &BoxCloudCoords) -> Matrix {
    let data = bc.rows.iter().flat_map(|r| r.iter().copied()).collect();
    Matrix::from_vec(bc.len(), 9, data).expect("nine columns per row")
}

/// Farthest point sampling. Starts at the lowest-index point among those
/// farthest from the centroid; ties always go to the lower index.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize) -> Result<Vec<usize>> {
    let centroid = cloud.centroid().ok_or(Error::EmptyCloud)?;
    let pts = &cloud.points;
    let m = m.min(pts.len());
    let mut first = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, p) in pts.iter().enumerate() {
        let d = (p - centroid).norm_squared();
        if d > best {
            best = d;
            first = i;
        }
    }
    let mut chosen = Vec::with_capacity(m);
    let mut nearest = vec![f64::INFINITY; pts.len()];
    let mut next = first;
    while chosen.len() < m {
        chosen.push(next);
        let c = pts[next];
        let mut far = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > far {
                far = nearest[i];
                next = i;
            }
        }
    }
    Ok(chosen)
}

/// For each seed, the up to `cap` nearest points within `radius` (nearest
/// first, ties by index), padded to exactly `cap` by repeating the nearest.
/// Returned flat, `cap` entries per seed.
pub fn group_neighbors(cloud: &PointCloud, seeds: &[usize], radius: f64, cap: usize) -> Vec<usize> {
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(seeds.len() * cap);
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for &s in seeds {
        let c = cloud.points[s];
        cand.clear();
        cand.extend(
            cloud
                .points
                .iter()
                .enumerate()
                .map(|(i, p)| ((p - c).norm_squared(), i))
                .filter(|&(d, _)| d <= r2),
        );
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cand.truncate(cap);
        let nearest = cand.first().map_or(s, |c| c.1);
        out.extend(cand.iter().map(|c| c.1));
        out.extend(std::iter::repeat_n(nearest, cap - cand.len()));
    }
    out
}

/// Single set-abstraction level: FPS seeds, radius grouping, a shared
/// perceptron on neighbor offsets and a max-pool per group.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEncoder {
    pub fc1: Dense,
    pub bn1: BatchNorm,
    pub fc2: Dense,
    pub bn2: BatchNorm,
    pub radius: f64,
    pub max_neighbors: usize,
}
crate::compose_module!(PointEncoder { fc1, bn1, fc2, bn2 });

#[derive(Debug, Clone)]
pub struct EncoderCache {
    offsets: Matrix,
    a1: Matrix,
    a2: Matrix,
    bn1: BnCache,
    bn2: BnCache,
    argmax: Vec<usize>,
}

impl EncoderCache {
    pub fn bn_stats(&self) -> Vec<BnStats> {
        [&self.bn1, &self.bn2].into_iter().filter_map(BnCache::stats).collect()
    }
}

impl PointEncoder {
    pub fn new(cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Dense::new(3, 32, rng),
            bn1: BatchNorm::new(32),
            fc2: Dense::new(32, cfg.channels, rng),
            bn2: BatchNorm::new(cfg.channels),
            radius: cfg.radius,
            max_neighbors: cfg.max_neighbors,
        }
    }

    pub fn channels(&self) -> usize {
        self.fc2.output_dim()
    }

    /// Encodes every point of `cloud` as a seed, in FPS order.
    /// FPS seeds and the neighbor offsets of each group, `max_neighbors` rows per seed.
    fn group(&self, cloud: &PointCloud) -> Result<(Vec<usize>, Matrix)> {
        let seeds = farthest_point_sample(cloud, cloud.len())?;
        let cap = self.max_neighbors;
        let groups = group_neighbors(cloud, &seeds, self.radius, cap);
        let mut offsets = Matrix::zeros(groups.len(), 3);
        for (row, (&n, &s)) in groups
            .iter()
            .zip(seeds.iter().flat_map(|s| std::iter::repeat_n(s, cap)))
            .enumerate()
        {
            let d = cloud.points[n] - cloud.points[s];
            offsets.row_mut(row).copy_from_slice(d.as_slice());
        }
        Ok((seeds, offsets))
    }

    pub fn encode(&self, cloud: &PointCloud, mode: Mode) -> Result<(FeatureCloud, EncoderCache)> {
        let cap = self.max_neighbors;
        let (seeds, offsets) = self.group(cloud)?;
        let (mut a1, bn1) = self.bn1.forward(&self.fc1.forward(&offsets)?, mode)?;
        relu_in_place(&mut a1);
        let (mut a2, bn2) = self.bn2.forward(&self.fc2.forward(&a1)?, mode)?;
        relu_in_place(&mut a2);
        let (features, argmax) = max_pool_groups(&a2, cap)?;
        let fc = FeatureCloud {
            coords: cloud.gather(&seeds),
            features,
            source: seeds,
        };
        Ok((
            fc,
            EncoderCache {
                offsets,
                a1,
                a2,
                bn1,
                bn2,
                argmax,
            },
        ))
    }

    /// Eval-mode encoding without the backward cache.
    pub fn infer(&self, cloud: &PointCloud) -> Result<FeatureCloud> {
        let (seeds, offsets) = self.group(cloud)?;
        let mut a1 = self.fc1.forward(&offsets)?;
        self.bn1.infer_relu_in_place(&mut a1)?;
        let mut a2 = self.fc2.forward(&a1)?;
        self.bn2.infer_relu_in_place(&mut a2)?;
        let (features, _) = max_pool_groups(&a2, self.max_neighbors)?;
        Ok(FeatureCloud {
            coords: cloud.gather(&seeds),
            features,
            source: seeds,
        })
    }

    pub fn backward(&self, cache: &EncoderCache, grad: &Matrix, grads: &mut PointEncoder) -> Result<()> {
        let mut g = max_pool_groups_backward(grad, &cache.argmax, cache.a2.rows());
        relu_backward_in_place(&cache.a2, &mut g);
        let g = self.bn2.backward(&cache.bn2, &g, &mut grads.bn2);
        let mut g = self.fc2.backward(&cache.a1, &g, &mut grads.fc2)?;
        relu_backward_in_place(&cache.a1, &mut g);
        let g = self.bn1.backward(&cache.bn1, &g, &mut grads.bn1);
        self.fc1
            .partial_backward(&cache.offsets, 0, true, &g, &mut grads.fc1, false)?;
        Ok(())
    }

    pub fn commit(&mut self, cache: &EncoderCache) {
        self.bn1.commit(&cache.bn1);
        self.bn2.commit(&cache.bn2);
    }

    /// Commits statistics taken from [`EncoderCache::bn_stats`].
    pub fn commit_stats(&mut self, stats: &[BnStats]) {
        if let [s1, s2] = stats {
            self.bn1.commit_stats(s1);
            self.bn2.commit_stats(s2);
        }
    }

    pub fn macs(&self, points: usize) -> usize {
        points * self.max_neighbors * (self.fc1.macs_per_row() + self.fc2.macs_per_row())
    }
}

/// Per-point two-layer head: dense, batch norm, relu, dense.
#[derive(Debug, Clone, PartialEq)]
pub struct PointHead {
    pub fc1: Dense,
    pub bn: BatchNorm,
    pub fc2: Dense,
}
crate::compose_module!(PointHead { fc1, bn, fc2 });

#[derive(Debug, Clone)]
pub struct HeadCache {
    a: Matrix,
    bn: BnCache,
}

impl HeadCache {
    pub fn bn_stats(&self) -> Option<BnStats> {
        self.bn.stats()
    }
}

impl PointHead {
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Dense::new(input, hidden, rng),
            bn: BatchNorm::new(hidden),
            fc2: Dense::new(hidden, output, rng),
        }
    }

    pub fn forward(&self, x: &Matrix, mode: Mode) -> Result<(Matrix, HeadCache)> {
        let (mut a, bn) = self.bn.forward(&self.fc1.forward(x)?, mode)?;
        relu_in_place(&mut a);
        let y = self.fc2.forward(&a)?;
        Ok((y, HeadCache { a, bn }))
    }

    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let mut a = self.fc1.forward(x)?;
        self.bn.infer_relu_in_place(&mut a)?;
        self.fc2.forward(&a)
    }

    pub fn backward(&self, x: &Matrix, cache: &HeadCache, grad: &Matrix, grads: &mut PointHead) -> Result<Matrix> {
        let mut g = self.fc2.backward(&cache.a, grad, &mut grads.fc2)?;
        relu_backward_in_place(&cache.a, &mut g);
        let g = self.bn.backward(&cache.bn, &g, &mut grads.bn);
        self.fc1.backward(x, &g, &mut grads.fc1)
    }

    pub fn commit(&mut self, cache: &HeadCache) {
        self.bn.commit(&cache.bn);
    }

    pub fn macs(&self, rows: usize) -> usize {
        rows * (self.fc1.macs_per_row() + self.fc2.macs_per_row())
    }
}

/// Squared-free Euclidean distances between every row of `a` and of `b`.
pub fn distance_map(a: &Matrix, b: &Matrix) -> Matrix {
    let mut d = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ra = a.row(i);
        let out = d.row_mut(i);
        for (j, o) in out.iter_mut().enumerate() {
            *o = ra
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
        }
    }
    d
}

/// Indices of the `k` nearest template rows for every search row, nearest
/// first, ties resolved by the lower template index. Flat, `k` per row.
pub fn knn_select(search_bc: &Matrix, template_bc: &Matrix, k: usize) -> Result<Vec<usize>> {
    if template_bc.rows() < k || k == 0 {
        return Err(Error::TemplateTooSmall {
            got: template_bc.rows(),
            k,
        });
    }
    if search_bc.cols() != template_bc.cols() {
        return Err(Error::shape("knn_select", template_bc.cols(), search_bc.cols()));
    }
    let dist = distance_map(search_bc, template_bc);
    let mut out = Vec::with_capacity(search_bc.rows() * k);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for i in 0..dist.rows() {
        best.clear();
        for (j, &d) in dist.row(i).iter().enumerate() {
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, j));
            best.truncate(k);
        }
        out.extend(best.iter().map(|b| b.1));
    }
    Ok(out)
}

/// Box-aware fusion: each search point gathers its `k` BoxCloud-nearest
/// template points, embeds the tuples `[f_t, p_t, c_t, f_s]` with a shared
/// two-layer perceptron and max-pools over the `k` tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct Baff {
    pub fc1: Dense,
    pub fc2: Dense,
    pub k: usize,
}
crate::compose_module!(Baff { fc1, fc2 });

pub struct BaffInputs<'a> {
    pub search_features: &'a Matrix,
    pub search_bc: &'a Matrix,
    pub template_features: &'a Matrix,
    pub template_coords: &'a PointCloud,
    pub template_bc: &'a Matrix,
}

#[derive(Debug, Clone)]
pub struct BaffCache {
    neighbors: Vec<usize>,
    template_input: Matrix,
    search_features: Matrix,
    h1: Matrix,
    h2: Matrix,
    argmax: Vec<usize>,
}

impl BaffCache {
    pub fn neighbors(&self) -> &[usize] {
        &self.neighbors
    }
}

const BAFF_HIDDEN: usize = 128;

impl Baff {
    pub fn new(channels: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Dense::new(2 * channels + 12, BAFF_HIDDEN, rng),
            fc2: Dense::new(BAFF_HIDDEN, channels, rng),
            k,
        }
    }

    fn channels(&self) -> usize {
        self.fc2.output_dim()
    }

    pub fn forward(&self, inp: &BaffInputs) -> Result<(Matrix, BaffCache)> {
        let c = self.channels();
        let m2 = inp.template_features.rows();
        if inp.template_coords.len() != m2 || inp.template_bc.rows() != m2 {
            return Err(Error::shape(
                "baff_fuse",
                format!("{m2} template rows"),
                format!("{} coords, {} boxclouds", inp.template_coords.len(), inp.template_bc.rows()),
            ));
        }
        let neighbors = knn_select(inp.search_bc, inp.template_bc, self.k)?;
        let mut coords = Matrix::zeros(m2, 3);
        for (i, p) in inp.template_coords.iter().enumerate() {
            coords.row_mut(i).copy_from_slice(p.as_slice());
        }
        let template_input = Matrix::hstack(&[inp.template_features, &coords, inp.template_bc])?;
        // the first layer splits into a template part and a search part
        let zt = self.fc1.partial_forward(&template_input, 0, true)?;
        let zs = self.fc1.partial_forward(inp.search_features, c + 12, false)?;
        let m1 = zs.rows();
        let k = self.k;
        let mut h1 = Matrix::zeros(m1 * k, BAFF_HIDDEN);
        for i in 0..m1 {
            for (slot, &j) in neighbors[i * k..(i + 1) * k].iter().enumerate() {
                let out = h1.row_mut(i * k + slot);
                for ((o, a), b) in out.iter_mut().zip(zt.row(j)).zip(zs.row(i)) {
                    *o = (a + b).max(0.0);
                }
            }
        }
        let mut h2 = self.fc2.forward(&h1)?;
        relu_in_place(&mut h2);
        let (fused, argmax) = max_pool_groups(&h2, k)?;
        Ok((
            fused,
            BaffCache {
                neighbors,
                template_input,
                search_features: inp.search_features.clone(),
                h1,
                h2,
                argmax,
            },
        ))
    }

    /// Returns the gradients for the search and template features.
    pub fn backward(&self, cache: &BaffCache, grad: &Matrix, grads: &mut Baff) -> Result<(Matrix, Matrix)> {
        let c = self.channels();
        let k = self.k;
        let mut g2 = max_pool_groups_backward(grad, &cache.argmax, cache.h2.rows());
        relu_backward_in_place(&cache.h2, &mut g2);
        let mut g1 = self.fc2.backward(&cache.h1, &g2, &mut grads.fc2)?;
        relu_backward_in_place(&cache.h1, &mut g1);
        let m1 = cache.search_features.rows();
        let m2 = cache.template_input.rows();
        let mut gzs = Matrix::zeros(m1, BAFF_HIDDEN);
        let mut gzt = Matrix::zeros(m2, BAFF_HIDDEN);
        for i in 0..m1 {
            for (slot, &j) in cache.neighbors[i * k..(i + 1) * k].iter().enumerate() {
                let g = g1.row(i * k + slot);
                for (a, b) in gzs.row_mut(i).iter_mut().zip(g) {
                    *a += b;
                }
                for (a, b) in gzt.row_mut(j).iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        let gt = self
            .fc1
            .partial_backward(&cache.template_input, 0, true, &gzt, &mut grads.fc1, true)?
            .expect("requested");
        let gs = self
            .fc1
            .partial_backward(&cache.search_features, c + 12, false, &gzs, &mut grads.fc1, true)?
            .expect("requested");
        Ok((gs, gt.cols_slice(0, c)))
    }

    pub fn macs(&self, search: usize, template: usize) -> usize {
        let c = self.channels();
        template * (c + 12) * BAFF_HIDDEN
            + search * c * BAFF_HIDDEN
            + search * self.k * self.fc2.macs_per_row()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{box_cloud, Box3D, BoxSize, Point3};
    use crate::nn::gradcheck::{check_input_grad, check_param_grads};
    use crate::nn::Module;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.5..0.5),
                )
            })
            .collect()
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn brute_fps(cloud: &PointCloud, m: usize) -> Vec<usize> {
        let c = cloud.centroid().unwrap();
        let d0: Vec<f64> = cloud.iter().map(|p| (p - c).norm()).collect();
        let max = d0.iter().cloned().fold(f64::MIN, f64::max);
        let mut out = vec![d0.iter().position(|&d| d == max).unwrap()];
        while out.len() < m {
            let score = |i: usize| {
                out.iter()
                    .map(|&s| (cloud.points[i] - cloud.points[s]).norm())
                    .fold(f64::INFINITY, f64::min)
            };
            let best = (0..cloud.len())
                .max_by(|&a, &b| score(a).total_cmp(&score(b)).then(b.cmp(&a)))
                .unwrap();
            out.push(best);
        }
        out
    }

    #[test]
    fn fps_picks_extremes_of_collinear_points() {
        let cloud: PointCloud = (0..4).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let mut picked = farthest_point_sample(&cloud, 2).unwrap();
        picked.sort();
        assert_eq!(picked, vec![0, 3]);
    }

    #[test]
    fn fps_matches_brute_force() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cloud = random_cloud(40, &mut rng);
            assert_eq!(farthest_point_sample(&cloud, 12).unwrap(), brute_fps(&cloud, 12));
        }
    }

    #[test]
    fn empty_cloud_is_error() {
        let enc = PointEncoder::new(&BackboneConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(
            enc.encode(&PointCloud::default(), Mode::Eval),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn grouping_pads_with_nearest() {
        let cloud: PointCloud = vec![Point3::zeros(), Point3::new(0.1, 0.0, 0.0), Point3::new(5.0, 0.0, 0.0)]
            .into_iter()
            .collect();
        let g = group_neighbors(&cloud, &[0, 2], 0.6, 4);
        assert_eq!(g, vec![0, 1, 0, 0, 2, 2, 2, 2]);
    }

    #[test]
    fn identical_points_give_identical_features() {
        let enc = PointEncoder::new(&BackboneConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
        let cloud: PointCloud = std::iter::repeat_n(Point3::new(1.0, 2.0, 3.0), 10).collect();
        let (fc, _) = enc.encode(&cloud, Mode::Eval).unwrap();
        for i in 1..fc.len() {
            assert_eq!(fc.features.row(i), fc.features.row(0));
        }
    }

    #[test]
    fn encoding_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = PointEncoder::new(&BackboneConfig::default(), &mut rng);
        let cloud = random_cloud(64, &mut rng);
        let shifted = cloud.translated(&Point3::new(3.0, -7.0, 0.25));
        for mode in [Mode::Train, Mode::Eval] {
            let (a, _) = enc.encode(&cloud, mode).unwrap();
            let (b, _) = enc.encode(&shifted, mode).unwrap();
            assert_eq!(a.source, b.source);
            assert!(a.features.zip_map(&b.features, |x, y| x - y).max_abs() < 1e-9);
        }
    }

    #[test]
    fn inference_matches_eval_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut enc = PointEncoder::new(&BackboneConfig::default(), &mut rng);
        enc.bn1.beta = random(1, enc.bn1.channels(), &mut rng);
        enc.bn2.running_mean = random(1, enc.bn2.channels(), &mut rng);
        let cloud = random_cloud(40, &mut rng);
        assert_eq!(enc.infer(&cloud).unwrap(), enc.encode(&cloud, Mode::Eval).unwrap().0);
        let mut head = PointHead::new(8, 16, 9, &mut rng);
        head.bn.beta = random(1, 16, &mut rng);
        let x = random(7, 8, &mut rng);
        assert_eq!(head.infer(&x).unwrap(), head.forward(&x, Mode::Eval).unwrap().0);
    }

    #[test]
    fn zero_head_gives_zero_rows() {
        let mut head = PointHead::new(8, 16, 9, &mut ChaCha8Rng::seed_from_u64(0));
        head.fc2 = Dense::zeros(16, 9);
        let (y, _) = head.forward(&Matrix::filled(5, 8, 0.3), Mode::Eval).unwrap();
        assert_eq!(y.shape(), (5, 9));
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn distance_map_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(7, 9, &mut rng);
        let b = random(5, 9, &mut rng);
        let d = distance_map(&a, &b);
        for i in 0..7 {
            for j in 0..5 {
                let direct: f64 = (0..9).map(|c| (a.get(i, c) - b.get(j, c)).powi(2)).sum::<f64>().sqrt();
                assert!((d.get(i, j) - direct).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn knn_identity_with_k1() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bc = random(10, 9, &mut rng);
        assert_eq!(knn_select(&bc, &bc, 1).unwrap(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn knn_matches_sorted_distance_map() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random(12, 9, &mut rng);
            let t = random(9, 9, &mut rng);
            let got = knn_select(&s, &t, 4).unwrap();
            let d = distance_map(&s, &t);
            for i in 0..12 {
                let mut order: Vec<usize> = (0..9).collect();
                order.sort_by(|&a, &b| d.get(i, a).total_cmp(&d.get(i, b)).then(a.cmp(&b)));
                assert_eq!(&got[i * 4..i * 4 + 4], &order[..4]);
            }
        }
    }

    #[test]
    fn knn_tie_break_prefers_lower_index() {
        let t = Matrix::zeros(3, 9);
        let s = Matrix::zeros(1, 9);
        assert_eq!(knn_select(&s, &t, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn template_smaller_than_k_is_error() {
        let baff = Baff::new(4, 4, &mut ChaCha8Rng::seed_from_u64(0));
        let t = Matrix::zeros(3, 4);
        let bc = Matrix::zeros(3, 9);
        let coords: PointCloud = std::iter::repeat_n(Point3::zeros(), 3).collect();
        let inp = BaffInputs {
            search_features: &Matrix::zeros(2, 4),
            search_bc: &Matrix::zeros(2, 9),
            template_features: &t,
            template_coords: &coords,
            template_bc: &bc,
        };
        assert!(matches!(baff.forward(&inp), Err(Error::TemplateTooSmall { got: 3, k: 4 })));
    }

    fn baff_instance(seed: u64, m1: usize, m2: usize, c: usize) -> (Baff, Matrix, Matrix, Matrix, PointCloud, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let baff = Baff::new(c, 4, &mut rng);
        let sf = random(m1, c, &mut rng);
        let sbc = random(m1, 9, &mut rng).map(|v| v.abs() + 0.5);
        let tf = random(m2, c, &mut rng);
        let tc = random_cloud(m2, &mut rng);
        let size = BoxSize::new(1.0, 1.5, 2.0);
        let tbc = boxcloud_matrix(&box_cloud(&tc, &Box3D::at_origin(size).unwrap()));
        (baff, sf, sbc, tf, tc, tbc)
    }

    #[test]
    fn fusion_is_invariant_to_template_order() {
        let (baff, sf, sbc, tf, tc, tbc) = baff_instance(7, 10, 12, 6);
        let inp = BaffInputs {
            search_features: &sf,
            search_bc: &sbc,
            template_features: &tf,
            template_coords: &tc,
            template_bc: &tbc,
        };
        let (a, _) = baff.forward(&inp).unwrap();
        let perm: Vec<usize> = (0..12).rev().collect();
        let (tf2, tc2, tbc2) = (tf.gather_rows(&perm), tc.gather(&perm), tbc.gather_rows(&perm));
        let inp = BaffInputs {
            search_features: &sf,
            search_bc: &sbc,
            template_features: &tf2,
            template_coords: &tc2,
            template_bc: &tbc2,
        };
        let (b, _) = baff.forward(&inp).unwrap();
        assert!(a.zip_map(&b, |x, y| x - y).max_abs() < 1e-12);
    }

    #[test]
    fn baff_gradients_match_finite_differences() {
        for seed in 0..20 {
            let (baff, sf, sbc, tf, tc, tbc) = baff_instance(seed, 8, 8, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let proj = random(8, 8, &mut rng);
            let run = |b: &Baff, sf: &Matrix, tf: &Matrix| {
                let inp = BaffInputs {
                    search_features: sf,
                    search_bc: &sbc,
                    template_features: tf,
                    template_coords: &tc,
                    template_bc: &tbc,
                };
                b.forward(&inp).unwrap().0.zip_map(&proj, |x, p| x * p).sum()
            };
            let inp = BaffInputs {
                search_features: &sf,
                search_bc: &sbc,
                template_features: &tf,
                template_coords: &tc,
                template_bc: &tbc,
            };
            let (_, cache) = baff.forward(&inp).unwrap();
            let mut grads = baff.zeros_like();
            let (gs, gt) = baff.backward(&cache, &proj, &mut grads).unwrap();
            assert!(check_param_grads(&baff, &grads, |b| run(b, &sf, &tf)) <= 1e-4);
            assert!(check_input_grad(&sf, &gs, |x| run(&baff, x, &tf)) <= 1e-4);
            assert!(check_input_grad(&tf, &gt, |x| run(&baff, &sf, x)) <= 1e-4);
        }
    }

    #[test]
    fn encoder_and_head_gradients_match_finite_differences() {
        let cfg = BackboneConfig {
            channels: 8,
            ..Default::default()
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut enc = PointEncoder::new(&cfg, &mut rng);
            // zero-offset padding rows normalize to exactly zero, a relu kink at beta = 0
            enc.bn1.beta = random(1, 32, &mut rng);
            enc.bn2.beta = random(1, 8, &mut rng);
            let head = PointHead::new(8, 6, 9, &mut rng);
            let cloud = random_cloud(8, &mut rng);
            let proj = random(8, 9, &mut rng);
            let loss = |e: &PointEncoder, h: &PointHead| {
                let (fc, _) = e.encode(&cloud, Mode::Train).unwrap();
                h.forward(&fc.features, Mode::Train).unwrap().0.zip_map(&proj, |a, b| a * b).sum()
            };
            let (fc, ec) = enc.encode(&cloud, Mode::Train).unwrap();
            let (_, hc) = head.forward(&fc.features, Mode::Train).unwrap();
            let mut hg = head.zeros_like();
            let gf = head.backward(&fc.features, &hc, &proj, &mut hg).unwrap();
            let mut eg = enc.zeros_like();
            enc.backward(&ec, &gf, &mut eg).unwrap();
            assert!(check_param_grads(&head, &hg, |h| loss(&enc, h)) <= 1e-4);
            let err = check_param_grads(&enc, &eg, |e| loss(e, &head));
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }
}
