//! Frame-by-frame tracking: search area, motion query, voting, template
//! upkeep.

use std::time::Instant;

use crate::data::Tracklet;
use crate::error::{Error, Result};
use crate::evm::predict_box;
use crate::geometry::{crop, enlarge, resample, to_box_frame, Box3D, BoxSize, Point3, PointCloud};
use crate::model::{DmtNet, TemplateFeatures};
use crate::motion::{predict, MpmConfig, StateHistory};
use crate::seed::derive_seed2;

pub const ALL_PREVIOUS_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateStrategy {
    FirstGt,
    Previous,
    FirstAndPrevious,
    AllPrevious,
}

impl TemplateStrategy {
    pub const ALL: [TemplateStrategy; 4] = [Self::FirstGt, Self::Previous, Self::FirstAndPrevious, Self::AllPrevious];

    pub fn name(&self) -> &'static str {
        match self {
            Self::FirstGt => "first-gt",
            Self::Previous => "previous",
            Self::FirstAndPrevious => "first-and-previous",
            Self::AllPrevious => "all-previous",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

/// Which parts of the pipeline produce the output box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackMode {
    /// Voting at the motion-predicted center.
    Full,
    /// Voting at the previous center, no motion model.
    EvmOnly,
    /// The previous box moved to the motion-predicted center.
    MpmOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub search_margin: f64,
    pub template_strategy: TemplateStrategy,
    pub mpm: MpmConfig,
    pub template_points: usize,
    pub search_points: usize,
    pub mode: TrackMode,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            search_margin: 2.0,
            template_strategy: TemplateStrategy::FirstAndPrevious,
            mpm: MpmConfig::ConstVel,
            template_points: 128,
            search_points: 256,
            mode: TrackMode::Full,
            seed: 0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.search_margin > 0.0) {
            return Err(Error::Config("search margin must be positive".into()));
        }
        if self.template_points < k || self.search_points < k {
            return Err(Error::Config(format!("point budgets must be at least k = {k}")));
        }
        self.mpm.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    /// Template in its object frame.
    pub template: PointCloud,
    pub size: BoxSize,
    pub history: StateHistory,
    pub last_box: Box3D,
    pub first_crop: PointCloud,
    buffer: PointCloud,
    encoded: Option<TemplateFeatures>,
    frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub frame: usize,
    pub pred: Box3D,
    pub coarse_center: Point3,
    pub fallback: bool,
    pub template_kept: bool,
    pub micros: u64,
}

pub struct Tracker<'a> {
    pub net: &'a DmtNet,
    pub cfg: &'a TrackerConfig,
}

impl<'a> Tracker<'a> {
    pub fn new(net: &'a DmtNet, cfg: &'a TrackerConfig) -> Result<Self> {
        cfg.validate(net.baff.k)?;
        Ok(Self { net, cfg })
    }

    fn seed(&self, frame: usize, purpose: u64) -> u64 {
        derive_seed2(self.cfg.seed, frame as u64, purpose)
    }

    fn encode(&self, template: &PointCloud, size: BoxSize) -> Result<Option<TemplateFeatures>> {
        match self.cfg.mode {
            TrackMode::MpmOnly => Ok(None),
            _ => self.net.encode_template(template, size).map(Some),
        }
    }

    pub fn init(&self, first_frame: &PointCloud, b_init: &Box3D) -> Result<TrackerState> {
        let first_crop = to_box_frame(&crop(first_frame, b_init), b_init);
        if first_crop.is_empty() {
            return Err(Error::NoTargetPoints);
        }
        let template = resample(&first_crop, self.cfg.template_points, self.seed(0, 0))?;
        let encoded = self.encode(&template, b_init.size())?;
        Ok(TrackerState {
            template,
            size: b_init.size(),
            history: StateHistory::new(b_init.center()),
            last_box: *b_init,
            buffer: first_crop.clone(),
            first_crop,
            encoded,
            frame: 0,
        })
    }

    pub fn step(&self, state: &mut TrackerState, frame: &PointCloud) -> Result<StepReport> {
        let start = Instant::now();
        state.frame += 1;
        let t = state.frame;
        let last = state.last_box;
        let coarse = predict(&state.history.centers(), &self.cfg.mpm)?;
        let region = crop(frame, &enlarge(&last, self.cfg.search_margin));
        let (pred, fallback) = if region.is_empty() {
            (last.with_center(coarse), true)
        } else {
            match self.cfg.mode {
                TrackMode::MpmOnly => (last.with_center(coarse), false),
                TrackMode::Full | TrackMode::EvmOnly => {
                    let search = resample(&to_box_frame(&region, &last), self.cfg.search_points, self.seed(t, 1))?;
                    let query = match self.cfg.mode {
                        TrackMode::Full => last.world_to_local(&coarse),
                        _ => Point3::zeros(),
                    };
                    let template = state.encoded.as_ref().expect("encoded for voting modes");
                    let inf = self.net.infer(template, &search, query)?;
                    let local = predict_box(&inf.output, query, state.size)?;
                    (last.box_to_world(&local), false)
                }
            }
        };
        if !pred.center().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("predicted center at frame {t}")));
        }
        state.history.push(pred.center());
        state.last_box = pred;
        let template_kept = self.update_template(state, frame, t)?;
        Ok(StepReport {
            frame: t,
            pred,
            coarse_center: coarse,
            fallback,
            template_kept,
            micros: start.elapsed().as_micros() as u64,
        })
    }

    /// Returns true when the latest crop was empty and the template stayed.
    fn update_template(&self, state: &mut TrackerState, frame: &PointCloud, t: usize) -> Result<bool> {
        let strategy = self.cfg.template_strategy;
        if strategy == TemplateStrategy::FirstGt {
            return Ok(false);
        }
        let latest = to_box_frame(&crop(frame, &state.last_box), &state.last_box);
        if latest.is_empty() {
            return Ok(true);
        }
        let raw = match strategy {
            TemplateStrategy::FirstGt => unreachable!(),
            TemplateStrategy::Previous => latest,
            TemplateStrategy::FirstAndPrevious => state.first_crop.concat(&latest),
            TemplateStrategy::AllPrevious => {
                let mut all = state.buffer.concat(&latest);
                if all.len() > ALL_PREVIOUS_CAP {
                    all.points.drain(..all.len() - ALL_PREVIOUS_CAP);
                }
                state.buffer = all.clone();
                all
            }
        };
        state.template = resample(&raw, self.cfg.template_points, self.seed(t, 2))?;
        state.encoded = self.encode(&state.template, state.size)?;
        Ok(false)
    }

    /// One-pass run: initialized from the first ground-truth box, never
    /// re-initialized. Returns one report per frame after the first.
    pub fn run(&self, tracklet: &Tracklet) -> Result<Vec<StepReport>> {
        let first = tracklet.frames.first().ok_or(Error::EmptySequence)?;
        let mut state = self.init(&first.points, &first.gt)?;
        tracklet.frames[1..]
            .iter()
            .map(|f| self.step(&mut state, &f.points))
            .collect()
    }
}
