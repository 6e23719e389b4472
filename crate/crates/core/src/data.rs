//! Synthetic tracklets, the line-delimited tracklet format and training
//! sample assembly.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geometry::{
    box_cloud, crop, enlarge, points_in_box, resample, to_box_frame, Box3D, BoxCloudCoords, BoxSize, Point3,
    PointCloud,
};
use crate::motion::{CenterPair, HISTORY_WINDOW};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccelSegment {
    pub frames: usize,
    /// Acceleration along the heading, m/frame².
    pub accel: f64,
}

/// Speeds are in meters per frame along the box heading.
#[derive(Debug, Clone, PartialEq)]
pub enum MotionPattern {
    Linear { speed: f64 },
    PiecewiseAccel { initial_speed: f64, segments: Vec<AccelSegment> },
    SinusoidalYaw { speed: f64, amplitude: f64, period: f64 },
    RandomWalk { sigma_step: f64 },
}

impl MotionPattern {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Linear { .. } => "linear",
            Self::PiecewiseAccel { .. } => "piecewise-accel",
            Self::SinusoidalYaw { .. } => "sinusoidal-yaw",
            Self::RandomWalk { .. } => "random-walk",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub motion: MotionPattern,
    pub size: BoxSize,
    pub frames: usize,
    /// Surface samples per square meter.
    pub density: f64,
    pub noise: f64,
    pub dropout: f64,
    pub distractors: usize,
    pub min_distractor_dist: f64,
    /// Ground-level center and heading of the target in frame 0.
    pub start: Point3,
    pub start_yaw: f64,
    pub category: String,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config("a tracklet needs at least 2 frames".into()));
        }
        if !(self.density > 0.0) {
            return Err(Error::Config("density must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if !(self.noise >= 0.0) || !(self.min_distractor_dist >= 0.0) {
            return Err(Error::Config("noise and distractor distance must be non-negative".into()));
        }
        Box3D::at_origin(self.size).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub points: PointCloud,
    pub gt: Box3D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: u32,
    pub category: String,
    pub frames: Vec<Frame>,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn centers(&self) -> Vec<Point3> {
        self.frames.iter().map(|f| f.gt.center()).collect()
    }
}

/// Per-frame `(center, yaw)` of the target. Centers sit at half height above
/// the ground plane `z = 0`.
pub fn simulate_trajectory(cfg: &SceneConfig, rng: &mut impl Rng) -> Vec<(Point3, f64)> {
    let z = 0.5 * cfg.size.h;
    let start = Point3::new(cfg.start.x, cfg.start.y, z);
    let heading = |yaw: f64| Point3::new(yaw.cos(), yaw.sin(), 0.0);
    let mut out = Vec::with_capacity(cfg.frames);
    match &cfg.motion {
        MotionPattern::Linear { speed } => {
            for t in 0..cfg.frames {
                out.push((start + heading(cfg.start_yaw) * (speed * t as f64), cfg.start_yaw));
            }
        }
        MotionPattern::PiecewiseAccel {
            initial_speed,
            segments,
        } => {
            let dir = heading(cfg.start_yaw);
            let mut accel = segments
                .iter()
                .flat_map(|s| std::iter::repeat_n(s.accel, s.frames))
                .chain(std::iter::repeat(segments.last().map_or(0.0, |s| s.accel)));
            let (mut pos, mut v) = (start, *initial_speed);
            out.push((pos, cfg.start_yaw));
            for _ in 1..cfg.frames {
                let a = accel.next().unwrap_or(0.0);
                pos += dir * (v + 0.5 * a);
                v += a;
                out.push((pos, cfg.start_yaw));
            }
        }
        MotionPattern::SinusoidalYaw {
            speed,
            amplitude,
            period,
        } => {
            let mut pos = start;
            out.push((pos, cfg.start_yaw));
            for t in 1..cfg.frames {
                let yaw = cfg.start_yaw + amplitude * (2.0 * PI * t as f64 / period).sin();
                pos += heading(yaw) * *speed;
                out.push((pos, yaw));
            }
        }
        MotionPattern::RandomWalk { sigma_step } => {
            let step = Normal::new(0.0, *sigma_step).expect("non-negative sigma");
            let mut pos = start;
            out.push((pos, cfg.start_yaw));
            for _ in 1..cfg.frames {
                pos += Point3::new(step.sample(rng), step.sample(rng), 0.0);
                out.push((pos, cfg.start_yaw));
            }
        }
    }
    out
}

/// Uniform samples on the four sides and the top of `size`, in the local
/// frame, `round(area * density)` per face.
pub fn sample_box_surface(size: BoxSize, density: f64, rng: &mut impl Rng) -> Vec<Point3> {
    let (hl, hw, hh) = (0.5 * size.l, 0.5 * size.w, 0.5 * size.h);
    // (area, fixed axis, fixed value) for the top and the four sides
    let faces = [
        (size.l * size.w, 2, hh),
        (size.w * size.h, 0, -hl),
        (size.w * size.h, 0, hl),
        (size.l * size.h, 1, -hw),
        (size.l * size.h, 1, hw),
    ];
    let half = [hl, hw, hh];
    let mut pts = Vec::new();
    for (area, axis, value) in faces {
        let n = (area * density).round() as usize;
        for _ in 0..n {
            let mut p = Point3::zeros();
            for (k, h) in half.iter().enumerate() {
                p[k] = if k == axis { value } else { rng.random_range(-h..=*h) };
            }
            pts.push(p);
        }
    }
    pts
}

/// Keeps the samples on the half of the box facing a sensor at the origin.
pub fn visible_half(points: &[Point3], center: Point3) -> Vec<Point3> {
    let to_sensor = -center;
    points
        .iter()
        .copied()
        .filter(|p| (p - center).dot(&to_sensor) > 0.0)
        .collect()
}

fn object_points(
    b: &Box3D,
    cfg: &SceneConfig,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<Point3> {
    let local = sample_box_surface(cfg.size, cfg.density, rng);
    let world: Vec<Point3> = local.iter().map(|p| b.local_to_world(p)).collect();
    let mut out = Vec::new();
    for p in visible_half(&world, b.center()) {
        if !rng.random_bool(cfg.dropout) {
            out.push(p + Point3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng)));
        }
    }
    out
}

pub fn generate_tracklet(id: u32, cfg: &SceneConfig, seed: u64) -> Result<Tracklet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let trajectory = simulate_trajectory(cfg, &mut rng);
    let offsets: Vec<Point3> = (0..cfg.distractors)
        .map(|_| {
            let r = rng.random_range(cfg.min_distractor_dist..=cfg.min_distractor_dist + 4.0);
            let phi = rng.random_range(-PI..PI);
            Point3::new(r * phi.cos(), r * phi.sin(), 0.0)
        })
        .collect();
    let clutter_half = 0.5 * cfg.size.l.max(cfg.size.w) + 3.0;
    let mut frames = Vec::with_capacity(cfg.frames);
    for (t, &(center, yaw)) in trajectory.iter().enumerate() {
        let gt = Box3D::new(center, cfg.size, yaw)?;
        let target = object_points(&gt, cfg, &noise, &mut rng);
        if t == 0 && target.is_empty() {
            return Err(Error::NoTargetPoints);
        }
        let mut pts = target.clone();
        for off in &offsets {
            let d = gt.with_center(center + off);
            pts.extend(object_points(&d, cfg, &noise, &mut rng));
        }
        let clutter = (0.1 * target.len() as f64).round() as usize;
        for _ in 0..clutter {
            pts.push(Point3::new(
                center.x + rng.random_range(-clutter_half..=clutter_half),
                center.y + rng.random_range(-clutter_half..=clutter_half),
                -0.05 + noise.sample(&mut rng),
            ));
        }
        pts.shuffle(&mut rng);
        frames.push(Frame {
            points: PointCloud::new(pts),
            gt,
        });
    }
    Ok(Tracklet {
        id,
        category: cfg.category.clone(),
        frames,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Category {
    pub name: &'static str,
    pub size: BoxSize,
    pub density: f64,
    pub speed: (f64, f64),
    pub max_accel: f64,
    pub walk_sigma: f64,
}

pub const CATEGORIES: [Category; 3] = [
    Category {
        name: "car",
        size: BoxSize { h: 1.55, w: 1.7, l: 4.2 },
        density: 24.0,
        speed: (0.3, 1.5),
        max_accel: 0.1,
        walk_sigma: 0.15,
    },
    Category {
        name: "pedestrian",
        size: BoxSize { h: 1.75, w: 0.65, l: 0.8 },
        density: 60.0,
        speed: (0.05, 0.2),
        max_accel: 0.02,
        walk_sigma: 0.05,
    },
    Category {
        name: "cyclist",
        size: BoxSize { h: 1.75, w: 0.6, l: 1.8 },
        density: 50.0,
        speed: (0.2, 0.6),
        max_accel: 0.05,
        walk_sigma: 0.1,
    },
];

/// Knobs shared by every tracklet of a generated suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteConfig {
    pub frames: usize,
    pub noise: f64,
    pub dropout: f64,
    pub distractors: usize,
    pub min_distractor_dist: f64,
    pub density_scale: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            frames: 20,
            noise: 0.02,
            dropout: 0.3,
            distractors: 1,
            min_distractor_dist: 4.0,
            density_scale: 1.0,
        }
    }
}

/// Scene with a random category, motion pattern and placement.
pub fn random_scene(suite: &SuiteConfig, rng: &mut impl Rng) -> SceneConfig {
    let cat = CATEGORIES[rng.random_range(0..CATEGORIES.len())];
    let speed = rng.random_range(cat.speed.0..=cat.speed.1);
    let motion = match rng.random_range(0..4) {
        0 => MotionPattern::Linear { speed },
        1 => MotionPattern::PiecewiseAccel {
            initial_speed: speed,
            segments: (0..suite.frames.div_ceil(5))
                .map(|_| AccelSegment {
                    frames: 5,
                    accel: rng.random_range(-cat.max_accel..=cat.max_accel),
                })
                .collect(),
        },
        2 => MotionPattern::SinusoidalYaw {
            speed,
            amplitude: rng.random_range(0.2..=0.6),
            period: rng.random_range(12.0..=30.0),
        },
        _ => MotionPattern::RandomWalk {
            sigma_step: cat.walk_sigma,
        },
    };
    let range = rng.random_range(8.0..=20.0);
    let bearing = rng.random_range(-PI..PI);
    SceneConfig {
        motion,
        size: cat.size,
        frames: suite.frames,
        density: cat.density * suite.density_scale,
        noise: suite.noise,
        dropout: suite.dropout,
        distractors: suite.distractors,
        min_distractor_dist: suite.min_distractor_dist,
        start: Point3::new(range * bearing.cos(), range * bearing.sin(), 0.0),
        start_yaw: rng.random_range(-PI..PI),
        category: cat.name.to_string(),
    }
}

/// `count` tracklets with ids `first_id..`; tracklet `i` depends only on
/// `(seed, first_id + i)`.
pub fn generate_suite(suite: &SuiteConfig, count: usize, seed: u64, first_id: u32) -> Result<Vec<Tracklet>> {
    (0..count as u32)
        .map(|i| {
            let id = first_id + i;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::from(id)));
            // a scene whose first frame comes out empty is redrawn
            for _ in 0..100 {
                let scene = random_scene(suite, &mut rng);
                match generate_tracklet(id, &scene, rng.random()) {
                    Err(Error::NoTargetPoints) => continue,
                    other => return other,
                }
            }
            Err(Error::NoTargetPoints)
        })
        .collect()
}

/// All stride-1 windows of 11 consecutive ground-truth centers.
pub fn extract_center_sequences(tracklets: &[Tracklet]) -> Vec<CenterPair> {
    tracklets
        .iter()
        .flat_map(|t| {
            t.centers()
                .windows(HISTORY_WINDOW + 1)
                .map(|w| CenterPair {
                    window: std::array::from_fn(|i| w[i]),
                    target: w[HISTORY_WINDOW],
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleBudgets {
    pub template_points: usize,
    pub search_points: usize,
    pub margin: f64,
    pub jitter: f64,
}

impl Default for SampleBudgets {
    fn default() -> Self {
        Self {
            template_points: 128,
            search_points: 256,
            margin: 2.0,
            jitter: 0.3,
        }
    }
}

/// One supervised frame pair. The template lives in its object frame and
/// the search cloud in the frame of the (jittered) previous box.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub template: PointCloud,
    pub template_bc: BoxCloudCoords,
    pub template_size: BoxSize,
    pub search: PointCloud,
    pub gt_box: Box3D,
    pub labels: Vec<bool>,
    pub gt_bc: BoxCloudCoords,
}

impl TrainingSample {
    pub fn mask(&self) -> &[bool] {
        &self.labels
    }

    pub fn gt_center(&self) -> Point3 {
        self.gt_box.center()
    }
}

/// Object-frame crop of a frame's ground-truth box.
pub fn object_crop(frame: &Frame) -> PointCloud {
    to_box_frame(&crop(&frame.points, &frame.gt), &frame.gt)
}

/// Samples for every consecutive frame pair, built from ground-truth boxes
/// with the first and previous crops as template. Pairs with an empty
/// template or search region are skipped.
pub fn make_training_samples(tracklet: &Tracklet, budgets: &SampleBudgets, seed: u64) -> Vec<TrainingSample> {
    let Some(first) = tracklet.frames.first() else {
        return Vec::new();
    };
    let first_crop = object_crop(first);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for t in 0..tracklet.len().saturating_sub(1) {
        let (prev, next) = (&tracklet.frames[t], &tracklet.frames[t + 1]);
        let j = budgets.jitter;
        let mut jitter = || if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
        let offset = Point3::new(jitter(), jitter(), jitter());
        let (tseed, sseed) = (rng.random(), rng.random());
        let template_raw = if t == 0 {
            first_crop.clone()
        } else {
            first_crop.concat(&object_crop(prev))
        };
        let Ok(template) = resample(&template_raw, budgets.template_points, tseed) else {
            log::debug!("tracklet {} frame {t}: empty template, pair skipped", tracklet.id);
            continue;
        };
        let reference = prev.gt.with_center(prev.gt.center() + offset);
        let region = crop(&next.points, &enlarge(&reference, budgets.margin));
        let Ok(search) = resample(&to_box_frame(&region, &reference), budgets.search_points, sseed) else {
            log::debug!("tracklet {} frame {}: empty search region, pair skipped", tracklet.id, t + 1);
            continue;
        };
        let gt_box = reference.box_to_local(&next.gt);
        let origin = Box3D::at_origin(first.gt.size()).expect("validated size");
        out.push(TrainingSample {
            template_bc: box_cloud(&template, &origin),
            template_size: first.gt.size(),
            labels: points_in_box(&search, &gt_box),
            gt_bc: box_cloud(&search, &gt_box),
            template,
            search,
            gt_box,
        });
    }
    out
}

#[derive(Deserialize)]
struct FrameRecord {
    tracklet_id: u32,
    frame: u32,
    #[serde(rename = "box")]
    bbox: [f64; 7],
    points: Vec<[f64; 3]>,
    #[serde(default)]
    category: Option<String>,
}

fn push_f6(out: &mut String, v: f64) {
    use std::fmt::Write as _;
    write!(out, "{v:.6}").expect("writing to a string");
}

fn frame_line(t: &Tracklet, i: usize, f: &Frame) -> String {
    let b = &f.gt;
    let c = b.center();
    let s = b.size();
    let mut line = format!("{{\"tracklet_id\":{},\"frame\":{i},\"box\":[", t.id);
    for (k, v) in [c.x, c.y, c.z, s.h, s.w, s.l, b.yaw()].iter().enumerate() {
        if k > 0 {
            line.push(',');
        }
        push_f6(&mut line, *v);
    }
    line.push_str("],\"points\":[");
    for (k, p) in f.points.iter().enumerate() {
        if k > 0 {
            line.push(',');
        }
        line.push('[');
        push_f6(&mut line, p.x);
        line.push(',');
        push_f6(&mut line, p.y);
        line.push(',');
        push_f6(&mut line, p.z);
        line.push(']');
    }
    line.push_str("],\"category\":");
    line.push_str(&serde_json::to_string(&t.category).expect("strings serialize"));
    line.push('}');
    line
}

pub fn write_tracklets<W: Write>(mut w: W, tracklets: &[Tracklet]) -> std::io::Result<()> {
    for t in tracklets {
        for (i, f) in t.frames.iter().enumerate() {
            writeln!(w, "{}", frame_line(t, i, f))?;
        }
    }
    w.flush()
}

/// Parses the line-delimited format. Frames of a tracklet must be
/// contiguous and numbered from 0 with a constant box size.
pub fn read_tracklets<R: BufRead>(r: R) -> Result<Vec<Tracklet>> {
    let mut out: Vec<Tracklet> = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: lineno, msg };
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let [cx, cy, cz, h, w, l, yaw] = rec.bbox;
        let gt = Box3D::new(Point3::new(cx, cy, cz), BoxSize::new(h, w, l), yaw)
            .map_err(|e| parse_err(e.to_string()))?;
        let points: PointCloud = rec.points.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect();
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(parse_err("non-finite point".into()));
        }
        let frame = Frame { points, gt };
        match out.last_mut() {
            Some(t) if t.id == rec.tracklet_id => {
                if rec.frame as usize != t.frames.len() {
                    return Err(parse_err(format!(
                        "tracklet {} expected frame {}, got {}",
                        t.id,
                        t.frames.len(),
                        rec.frame
                    )));
                }
                let (a, b) = (t.frames[0].gt.size(), gt.size());
                if (a.h - b.h).abs() > 1e-6 || (a.w - b.w).abs() > 1e-6 || (a.l - b.l).abs() > 1e-6 {
                    return Err(parse_err(format!("box size changes within tracklet {}", t.id)));
                }
                t.frames.push(frame);
            }
            _ => {
                if out.iter().any(|t| t.id == rec.tracklet_id) {
                    return Err(parse_err(format!("tracklet {} is not contiguous", rec.tracklet_id)));
                }
                if rec.frame != 0 {
                    return Err(parse_err(format!(
                        "tracklet {} starts at frame {}",
                        rec.tracklet_id, rec.frame
                    )));
                }
                out.push(Tracklet {
                    id: rec.tracklet_id,
                    category: rec.category.unwrap_or_else(|| "unknown".into()),
                    frames: vec![frame],
                });
            }
        }
    }
    if let Some(t) = out.iter().find(|t| t.len() < 2) {
        return Err(Error::Data(format!("tracklet {} has a single frame", t.id)));
    }
    Ok(out)
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn save_tracklets(path: &Path, tracklets: &[Tracklet]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let res = if is_gz(path) {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        write_tracklets(&mut enc, tracklets).and_then(|_| enc.finish().map(|_| ()))
    } else {
        write_tracklets(BufWriter::new(file), tracklets)
    };
    res.map_err(|e| Error::io(path, e))
}

pub fn load_tracklets(path: &Path) -> Result<Vec<Tracklet>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader: Box<dyn Read> = if is_gz(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    read_tracklets(BufReader::new(reader))
}
