//! One-pass evaluation metrics, benchmark runs and ablation sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Tracklet;
use crate::error::{Error, Result};
use crate::geometry::{iou_3d, Box3D};
use crate::model::{DmtModel, DmtNet, ModelConfig};
use crate::motion::{predict, MpmConfig, MpmParams};
use crate::nn::Module;
use crate::tracker::{TemplateStrategy, TrackMode, Tracker, TrackerConfig};
use crate::train::{TrainConfig, Trainer};

/// Center errors at or beyond this distance count as misses.
pub const PRECISION_CAP: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeResult {
    pub success: f64,
    pub precision: f64,
    pub frames: usize,
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub param_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mac_estimate: Option<usize>,
}

/// Area under the IoU-threshold curve, integrated exactly from the sorted
/// values. Equal to the mean IoU.
pub fn success_auc(ious: &[f64]) -> f64 {
    let mut v: Vec<f64> = ious.iter().map(|x| x.clamp(0.0, 1.0)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut area = 0.0;
    let mut prev = 0.0;
    for (i, x) in v.iter().enumerate() {
        // fraction strictly above any threshold in (prev, x] is (n - i) / n
        area += (x - prev) * (v.len() - i) as f64 / n;
        prev = *x;
    }
    area
}

/// Riemann-sum precision with midpoint step `step`, for cross-checking the
/// closed form.
pub fn precision_numeric(errors: &[f64], step: f64) -> f64 {
    let steps = (PRECISION_CAP / step).round() as usize;
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = errors.len() as f64;
    let mut below = 0;
    let mut area = 0.0;
    for k in 0..steps {
        let d = (k as f64 + 0.5) * step;
        while below < sorted.len() && sorted[below] < d {
            below += 1;
        }
        area += below as f64 / n * step;
    }
    area / PRECISION_CAP
}

/// `(success, precision)` of aligned per-frame IoUs and center errors.
pub fn ope_metrics(ious: &[f64], errors: &[f64]) -> Result<(f64, f64)> {
    if ious.is_empty() {
        return Err(Error::EmptyInput);
    }
    if ious.len() != errors.len() {
        return Err(Error::shape("ope_metrics", ious.len(), errors.len()));
    }
    let n = ious.len() as f64;
    let success = ious.iter().sum::<f64>() / n;
    debug_assert!((success - success_auc(ious)).abs() <= 1e-12);
    let mut sorted: Vec<f64> = errors.iter().map(|e| e.min(PRECISION_CAP)).collect();
    sorted.sort_by(f64::total_cmp);
    let precision = sorted.iter().map(|e| (PRECISION_CAP - e) / PRECISION_CAP).sum::<f64>() / n;
    Ok((success, precision))
}

impl OpeResult {
    pub fn from_frames(ious: Vec<f64>, center_errors: Vec<f64>) -> Result<Self> {
        let (success, precision) = ope_metrics(&ious, &center_errors)?;
        Ok(Self {
            success,
            precision,
            frames: ious.len(),
            ious,
            center_errors,
            fps: None,
            param_count: None,
            mac_estimate: None,
        })
    }
}

/// Mean of per-group values weighted by their frame counts.
pub fn frame_weighted_mean(groups: &[(usize, f64)]) -> f64 {
    let frames: usize = groups.iter().map(|g| g.0).sum();
    groups.iter().map(|&(n, v)| n as f64 * v).sum::<f64>() / frames.max(1) as f64
}

/// Mean constant-velocity error over frames with two predecessors.
pub fn motion_complexity(tracklet: &Tracklet) -> Result<f64> {
    let c = tracklet.centers();
    if c.len() < 3 {
        return Err(Error::InsufficientTrackletLength { needed: 3 });
    }
    let errs: Vec<f64> = (2..c.len())
        .map(|t| {
            let pred = predict(&c[t - 2..t], &MpmConfig::ConstVel).expect("non-empty history");
            (c[t] - pred).norm()
        })
        .collect();
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Predicted boxes for frames `1..T` of one tracklet.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackletRun {
    pub id: u32,
    pub category: String,
    pub boxes: Vec<Box3D>,
    pub micros: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skipped {
    pub id: u32,
    pub reason: String,
}

pub fn track_all(net: &DmtNet, cfg: &TrackerConfig, tracklets: &[Tracklet]) -> Result<(Vec<TrackletRun>, Vec<Skipped>)> {
    let tracker = Tracker::new(net, cfg)?;
    let outcomes: Vec<std::result::Result<TrackletRun, Skipped>> = tracklets
        .par_iter()
        .map(|t| match tracker.run(t) {
            Ok(reports) => Ok(TrackletRun {
                id: t.id,
                category: t.category.clone(),
                micros: Some(reports.iter().map(|r| r.micros).sum()),
                boxes: reports.into_iter().map(|r| r.pred).collect(),
            }),
            Err(e) => Err(Skipped {
                id: t.id,
                reason: e.to_string(),
            }),
        })
        .collect();
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => runs.push(r),
            Err(s) => {
                log::warn!("tracklet {} skipped: {}", s.id, s.reason);
                skipped.push(s);
            }
        }
    }
    Ok((runs, skipped))
}

/// Always reports the first ground-truth box.
pub fn persistence_runs(tracklets: &[Tracklet]) -> Vec<TrackletRun> {
    tracklets
        .iter()
        .filter(|t| !t.is_empty())
        .map(|t| TrackletRun {
            id: t.id,
            category: t.category.clone(),
            boxes: vec![t.frames[0].gt; t.len() - 1],
            micros: None,
        })
        .collect()
}

/// Reports the ground truth itself.
pub fn oracle_runs(tracklets: &[Tracklet]) -> Vec<TrackletRun> {
    tracklets
        .iter()
        .map(|t| TrackletRun {
            id: t.id,
            category: t.category.clone(),
            boxes: t.frames.iter().skip(1).map(|f| f.gt).collect(),
            micros: None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub per_category: BTreeMap<String, OpeResult>,
    pub mean: OpeResult,
    pub per_tracklet: Vec<(u32, OpeResult)>,
    pub skipped: Vec<Skipped>,
}

/// Scores runs against their tracklets by id. Every run must match a
/// tracklet with the same number of evaluated frames.
pub fn score(tracklets: &[Tracklet], runs: &[TrackletRun]) -> Result<BenchmarkReport> {
    let by_id: BTreeMap<u32, &Tracklet> = tracklets.iter().map(|t| (t.id, t)).collect();
    let mut missing: Vec<u32> = runs.iter().map(|r| r.id).filter(|id| !by_id.contains_key(id)).collect();
    missing.sort_unstable();
    if !missing.is_empty() {
        return Err(Error::Data(format!("predictions for unknown tracklets {missing:?}")));
    }
    let mut per_tracklet = Vec::new();
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>, u64, bool)> = BTreeMap::new();
    let mut sorted: Vec<&TrackletRun> = runs.iter().collect();
    sorted.sort_by_key(|r| r.id);
    for run in sorted {
        let t = by_id[&run.id];
        if run.boxes.len() + 1 != t.len() {
            return Err(Error::Data(format!(
                "tracklet {} has {} predictions for {} frames",
                run.id,
                run.boxes.len(),
                t.len()
            )));
        }
        let (ious, errs): (Vec<f64>, Vec<f64>) = run
            .boxes
            .iter()
            .zip(&t.frames[1..])
            .map(|(b, f)| (iou_3d(b, &f.gt), (b.center() - f.gt.center()).norm()))
            .unzip();
        let g = groups.entry(t.category.clone()).or_insert((Vec::new(), Vec::new(), 0, true));
        g.0.extend(&ious);
        g.1.extend(&errs);
        match run.micros {
            Some(m) => g.2 += m,
            None => g.3 = false,
        }
        per_tracklet.push((run.id, OpeResult::from_frames(ious, errs)?));
    }
    if groups.is_empty() {
        return Err(Error::EmptyInput);
    }
    let fps = |frames: usize, micros: u64, timed: bool| (timed && micros > 0).then(|| frames as f64 * 1e6 / micros as f64);
    let mut per_category = BTreeMap::new();
    let (mut all_i, mut all_e, mut all_m, mut all_timed) = (Vec::new(), Vec::new(), 0, true);
    for (cat, (i, e, m, timed)) in groups {
        all_i.extend(&i);
        all_e.extend(&e);
        all_m += m;
        all_timed &= timed;
        let mut r = OpeResult::from_frames(i, e)?;
        r.fps = fps(r.frames, m, timed);
        per_category.insert(cat, r);
    }
    let mut mean = OpeResult::from_frames(all_i, all_e)?;
    mean.fps = fps(mean.frames, all_m, all_timed);
    Ok(BenchmarkReport {
        per_category,
        mean,
        per_tracklet,
        skipped: Vec::new(),
    })
}

/// Tracks every tracklet and scores the result, with model size and
/// per-step cost attached to every row.
pub fn run_benchmark(net: &DmtNet, cfg: &TrackerConfig, tracklets: &[Tracklet]) -> Result<BenchmarkReport> {
    let (runs, skipped) = track_all(net, cfg, tracklets)?;
    let mut report = score(tracklets, &runs)?;
    report.skipped = skipped;
    let (params, macs) = match cfg.mode {
        TrackMode::MpmOnly => (0, 0),
        _ => (net.param_count(), net.step_macs(cfg.search_points, cfg.template_points)),
    };
    for r in report.per_category.values_mut().chain(std::iter::once(&mut report.mean)) {
        r.param_count = Some(params);
        r.mac_estimate = Some(macs);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    SampleDist,
    SampleCount,
    TemplateStrategy,
    MpmVariant,
}

pub const SAMPLE_DIST_GRID: [f64; 4] = [0.65, 0.75, 0.85, 0.95];
pub const SAMPLE_COUNT_GRID: [usize; 4] = [8, 16, 32, 64];

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            Self::SampleDist => "sample-dist",
            Self::SampleCount => "sample-count",
            Self::TemplateStrategy => "template-strategy",
            Self::MpmVariant => "mpm-variant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::SampleDist, Self::SampleCount, Self::TemplateStrategy, Self::MpmVariant]
            .into_iter()
            .find(|a| a.name() == s)
    }

    /// Whether each cell needs its own trained network.
    pub fn retrains(&self) -> bool {
        matches!(self, Self::SampleDist | Self::SampleCount)
    }
}

#[derive(Debug, Clone)]
pub struct AblationSpec {
    pub axis: AblationAxis,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    /// Network for axes that do not retrain; also supplies the LSTM.
    pub base: Option<DmtModel>,
    pub mpm: MpmParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    pub result: OpeResult,
}

fn train_net(model: &ModelConfig, cfg: TrainConfig, train: &[Tracklet]) -> Result<DmtNet> {
    let mut trainer = Trainer::new(model, cfg)?;
    for _ in 0..cfg.epochs {
        let rec = trainer.run_epoch(train)?;
        log::info!("epoch {} loss {:.5}", rec.epoch, rec.loss.total);
    }
    Ok(trainer.net)
}

/// One row per grid cell, all sharing the seeds of `spec`.
pub fn run_ablation(spec: &AblationSpec, train: &[Tracklet], test: &[Tracklet]) -> Result<Vec<AblationRow>> {
    let base = || {
        spec.base
            .as_ref()
            .ok_or_else(|| Error::Config(format!("axis {} needs a trained model", spec.axis.name())))
    };
    let mut rows = Vec::new();
    let mut push = |cell: String, report: BenchmarkReport| {
        log::info!("{cell}: success {:.4}", report.mean.success);
        rows.push(AblationRow {
            cell,
            result: report.mean,
        })
    };
    match spec.axis {
        AblationAxis::SampleDist => {
            for d in SAMPLE_DIST_GRID {
                let mut cfg = spec.train;
                cfg.evm.max_sample_dist = d;
                let net = train_net(&spec.model, cfg, train)?;
                push(format!("{d:.2}"), run_benchmark(&net, &spec.tracker, test)?);
            }
        }
        AblationAxis::SampleCount => {
            for s in SAMPLE_COUNT_GRID {
                let mut cfg = spec.train;
                cfg.evm.samples_per_frame = s;
                let net = train_net(&spec.model, cfg, train)?;
                push(s.to_string(), run_benchmark(&net, &spec.tracker, test)?);
            }
        }
        AblationAxis::TemplateStrategy => {
            let model = base()?;
            for strategy in TemplateStrategy::ALL {
                let cfg = TrackerConfig {
                    template_strategy: strategy,
                    ..spec.tracker.clone()
                };
                push(strategy.name().to_string(), run_benchmark(model.net()?, &cfg, test)?);
            }
        }
        AblationAxis::MpmVariant => {
            let model = base()?;
            let variants = spec.mpm.variants(model.lstm.as_ref())?;
            if variants.len() < 6 {
                log::warn!("model has no LSTM; the lstm cell is omitted");
            }
            for mpm in variants {
                let cfg = TrackerConfig {
                    mpm: mpm.clone(),
                    ..spec.tracker.clone()
                };
                push(mpm.name().to_string(), run_benchmark(model.net()?, &cfg, test)?);
            }
        }
    }
    Ok(rows)
}

/// One named row of a report, serialized as a single line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub name: String,
    #[serde(flatten)]
    pub result: OpeResult,
}

impl MetricRecord {
    pub fn new(name: &str, r: &OpeResult) -> Self {
        Self {
            name: name.to_string(),
            result: r.clone(),
        }
    }
}

/// Per-category records followed by the frame-weighted mean.
pub fn report_records(report: &BenchmarkReport) -> Vec<MetricRecord> {
    report
        .per_category
        .iter()
        .map(|(c, r)| MetricRecord::new(c, r))
        .chain(std::iter::once(MetricRecord::new("mean", &report.mean)))
        .collect()
}

/// Aligned text table with percentages to one decimal.
pub fn format_table(records: &[MetricRecord]) -> String {
    let width = records.iter().map(|r| r.name.len()).max().unwrap_or(4).max(8);
    let mut out = format!("{:<width$} {:>9} {:>10} {:>8} {:>9}\n", "name", "success", "precision", "frames", "fps");
    for rec in records {
        let r = &rec.result;
        let fps = r.fps.map_or_else(|| "-".to_string(), |f| format!("{f:.1}"));
        let _ = writeln!(
            out,
            "{:<width$} {:>9.1} {:>10.1} {:>8} {:>9}",
            rec.name,
            r.success * 100.0,
            r.precision * 100.0,
            r.frames,
            fps
        );
    }
    out
}

pub fn format_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from("name,success,precision,frames,fps,param_count,mac_estimate\n");
    let opt = |v: Option<String>| v.unwrap_or_default();
    for rec in records {
        let r = &rec.result;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            rec.name,
            r.success,
            r.precision,
            r.frames,
            opt(r.fps.map(|f| f.to_string())),
            opt(r.param_count.map(|f| f.to_string())),
            opt(r.mac_estimate.map(|f| f.to_string()))
        );
    }
    out
}

/// Splits tracklets into `buckets` equal-count groups by motion complexity,
/// lowest first. Tracklets shorter than three frames are left out.
pub fn complexity_buckets(tracklets: &[Tracklet], buckets: usize) -> Vec<Vec<&Tracklet>> {
    let mut scored: Vec<(f64, &Tracklet)> = tracklets
        .iter()
        .filter_map(|t| motion_complexity(t).ok().map(|c| (c, t)))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
    let n = scored.len();
    (0..buckets)
        .map(|b| scored[b * n / buckets..(b + 1) * n / buckets].iter().map(|s| s.1).collect())
        .collect()
}
