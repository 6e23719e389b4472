use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde_json::json;

use dmt_core::data::{extract_center_sequences, generate_suite, load_tracklets, save_tracklets, Tracklet};
use dmt_core::eval::{
    format_csv, format_table, motion_complexity, report_records, run_ablation, score, AblationAxis, AblationSpec,
    MetricRecord,
};
use dmt_core::gradsuite::{gradient_suite, GRAD_TOL};
use dmt_core::model::DmtModel;
use dmt_core::motion::{train_lstm, LstmMpm, HISTORY_WINDOW};
use dmt_core::seed::derive_seed;
use dmt_core::tracker::{TrackMode, Tracker};
use dmt_core::train::Trainer;
use dmt_core::Error;

use crate::config::RunConfig;
use crate::records::{box_array, read_steps, steps_to_runs, write_steps, StepLine};
use crate::{AblateArgs, CliError, CliResult, EvalArgs, GenDataArgs, GradcheckArgs, ModeArg, TrackArgs, TrainArgs};

/// Upper edges of the motion-complexity histogram buckets, in meters.
pub const COMPLEXITY_EDGES: [f64; 4] = [0.01, 0.03, 0.1, 0.3];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(io_err(path))?;
    Ok(())
}

fn write_records(path: &Path, records: &[MetricRecord]) -> CliResult {
    let mut w = create(path)?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| io_err(path)(e.into()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn emit(out: &mut dyn Write, value: serde_json::Value) -> CliResult {
    writeln!(out, "{value}").map_err(io_err(Path::new("<stdout>")))?;
    Ok(())
}

fn say(out: &mut dyn Write, text: &str) -> CliResult {
    out.write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>")))?;
    Ok(())
}

/// Counts per complexity bucket, with a trailing "n/a" bucket for
/// tracklets too short to score. The counts sum to the tracklet count.
pub fn complexity_histogram(tracklets: &[Tracklet]) -> Vec<(String, usize)> {
    let mut labels: Vec<String> = Vec::new();
    let mut lo = 0.0;
    for e in COMPLEXITY_EDGES {
        labels.push(format!("[{lo:.2}, {e:.2})"));
        lo = e;
    }
    labels.push(format!("[{lo:.2}, inf)"));
    labels.push("n/a".into());
    let mut counts = vec![0usize; labels.len()];
    for t in tracklets {
        let slot = match motion_complexity(t) {
            Ok(c) => COMPLEXITY_EDGES.iter().position(|&e| c < e).unwrap_or(COMPLEXITY_EDGES.len()),
            Err(_) => labels.len() - 1,
        };
        counts[slot] += 1;
    }
    labels.into_iter().zip(counts).collect()
}

pub fn gen_data(args: &GenDataArgs, out: &mut dyn Write) -> CliResult {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    if args.tracklets == 0 {
        return Err(CliError::Usage("--tracklets must be positive".into()));
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    let tracklets = generate_suite(&cfg.suite(), args.tracklets, seed, 0)?;
    save_tracklets(&args.out, &tracklets)?;
    let frames: usize = tracklets.iter().map(Tracklet::len).sum();
    let points: usize = tracklets
        .iter()
        .flat_map(|t| t.frames.iter().map(|f| f.points.len()))
        .sum();
    let mut text = format!(
        "tracklets {}\nframes {frames}\nmean points/frame {:.1}\nmotion complexity (m):\n",
        tracklets.len(),
        points as f64 / frames.max(1) as f64
    );
    let hist = complexity_histogram(&tracklets);
    let widest = hist.iter().map(|h| h.1).max().unwrap_or(0).max(1);
    for (label, n) in &hist {
        if label == "n/a" && *n == 0 {
            continue;
        }
        let bar = "#".repeat((n * 40).div_ceil(widest));
        text.push_str(&format!("  {label:<14} {n:>6} {bar}\n"));
    }
    say(out, &text)
}

/// Trains the LSTM motion model on every 11-center window of `tracklets`.
pub fn fit_lstm(cfg: &RunConfig, tracklets: &[Tracklet], out: &mut dyn Write) -> CliResult<LstmMpm> {
    let pairs = extract_center_sequences(tracklets);
    if pairs.is_empty() {
        return Err(Error::InsufficientTrackletLength {
            needed: HISTORY_WINDOW + 1,
        }
        .into());
    }
    log::info!("motion model: {} windows, {} epochs", pairs.len(), cfg.lstm_epochs);
    let (lstm, losses) = train_lstm(&pairs, &cfg.lstm())?;
    for (epoch, loss) in losses.iter().enumerate() {
        emit(out, json!({"phase": "mpm", "epoch": epoch, "loss": loss}))?;
    }
    Ok(lstm)
}

/// Runs the remaining epochs of `trainer`, checkpointing after each one.
pub fn fit_tracker(
    trainer: &mut Trainer,
    tracklets: &[Tracklet],
    lstm: Option<&LstmMpm>,
    checkpoint: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult {
    while trainer.epoch < trainer.cfg.epochs {
        let rec = trainer.run_epoch(tracklets)?;
        log::info!("epoch {} loss {:.5}", rec.epoch, rec.loss.total);
        emit(
            out,
            json!({
                "phase": "tracker",
                "epoch": rec.epoch,
                "lr": rec.lr,
                "samples": rec.samples,
                "loss": rec.loss.total,
                "cls": rec.loss.cls,
                "bc": rec.loss.bc,
                "bbox": rec.loss.bbox,
            }),
        )?;
        if let Some(path) = checkpoint {
            trainer.save_checkpoint(path, lstm)?;
        }
    }
    Ok(())
}

/// Both training phases from scratch.
pub fn fit_model(cfg: &RunConfig, tracklets: &[Tracklet], out: &mut dyn Write) -> CliResult<DmtModel> {
    let lstm = fit_lstm(cfg, tracklets, out)?;
    let mut trainer = Trainer::new(&cfg.model(), cfg.train())?;
    fit_tracker(&mut trainer, tracklets, Some(&lstm), None, out)?;
    Ok(DmtModel {
        net: Some(trainer.net),
        lstm: Some(lstm),
    })
}

pub fn train(args: &TrainArgs, out: &mut dyn Write) -> CliResult {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let tracklets = load_tracklets(&args.data)?;
    let (mut trainer, lstm) = match &args.resume {
        Some(path) => {
            let (t, lstm) = Trainer::resume(path, cfg.train())?;
            if t.net.config() != cfg.model() {
                return Err(Error::Config("checkpoint architecture differs from the config".into()).into());
            }
            log::info!("resuming at epoch {}", t.epoch);
            (t, lstm)
        }
        None => {
            let lstm = if args.tracker_only {
                None
            } else {
                Some(fit_lstm(&cfg, &tracklets, out)?)
            };
            if args.mpm_only {
                DmtModel { net: None, lstm }.save(&args.out)?;
                return Ok(());
            }
            (Trainer::new(&cfg.model(), cfg.train())?, lstm)
        }
    };
    fit_tracker(&mut trainer, &tracklets, lstm.as_ref(), args.checkpoint.as_deref(), out)?;
    DmtModel {
        net: Some(trainer.net),
        lstm,
    }
    .save(&args.out)?;
    Ok(())
}

fn baseline_steps(tracklets: &[Tracklet], oracle: bool) -> Vec<StepLine> {
    tracklets
        .iter()
        .flat_map(|t| {
            let first = t.frames[0].gt;
            t.frames.iter().enumerate().skip(1).map(move |(i, f)| {
                let b = if oracle { f.gt } else { first };
                let c = b.center();
                StepLine {
                    tracklet_id: t.id,
                    frame: i,
                    bbox: box_array(&b),
                    coarse_center: [c.x, c.y, c.z],
                    fallback: false,
                    micros: None,
                }
            })
        })
        .collect()
}

/// Step reports for every tracklet in input order. Tracklets whose
/// initialization fails are skipped with a warning.
pub fn track_steps(
    cfg: &RunConfig,
    model: Option<&DmtModel>,
    mode: ModeArg,
    tracklets: &[Tracklet],
    timing: bool,
) -> CliResult<Vec<StepLine>> {
    let mode = match mode {
        ModeArg::Persistence => return Ok(baseline_steps(tracklets, false)),
        ModeArg::Oracle => return Ok(baseline_steps(tracklets, true)),
        ModeArg::Full => TrackMode::Full,
        ModeArg::EvmOnly => TrackMode::EvmOnly,
        ModeArg::MpmOnly => TrackMode::MpmOnly,
    };
    let model = model.ok_or_else(|| CliError::Usage("--model is required for this mode".into()))?;
    let net = model.net()?;
    if net.config() != cfg.model() {
        log::warn!("model architecture differs from the config; using the model's");
    }
    let tcfg = cfg.tracker(model.lstm.as_ref(), mode)?;
    let tracker = Tracker::new(net, &tcfg)?;
    let per: Vec<Vec<StepLine>> = tracklets
        .par_iter()
        .map(|t| match tracker.run(t) {
            Ok(reports) => reports
                .into_iter()
                .map(|r| StepLine {
                    tracklet_id: t.id,
                    frame: r.frame,
                    bbox: box_array(&r.pred),
                    coarse_center: [r.coarse_center.x, r.coarse_center.y, r.coarse_center.z],
                    fallback: r.fallback,
                    micros: timing.then_some(r.micros),
                })
                .collect(),
            Err(e) => {
                log::warn!("tracklet {} skipped: {e}", t.id);
                Vec::new()
            }
        })
        .collect();
    Ok(per.into_iter().flatten().collect())
}

pub fn track(args: &TrackArgs) -> CliResult {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let model = args.model.as_deref().map(DmtModel::load).transpose()?;
    let tracklets = load_tracklets(&args.data)?;
    let steps = track_steps(&cfg, model.as_ref(), args.mode, &tracklets, args.timing)?;
    write_steps(create(&args.out)?, &steps).map_err(io_err(&args.out))?;
    Ok(())
}

/// Scores step reports against `tracklets`; one record per category and
/// the mean.
pub fn evaluate_steps(tracklets: &[Tracklet], steps: &[StepLine]) -> CliResult<Vec<MetricRecord>> {
    let categories: BTreeMap<u32, String> = tracklets.iter().map(|t| (t.id, t.category.clone())).collect();
    let runs = steps_to_runs(steps, &categories)?;
    let predicted: std::collections::BTreeSet<u32> = runs.iter().map(|r| r.id).collect();
    let unpredicted: Vec<u32> = categories.keys().filter(|id| !predicted.contains(id)).copied().collect();
    if !unpredicted.is_empty() {
        log::warn!("no predictions for tracklets {unpredicted:?}");
    }
    Ok(report_records(&score(tracklets, &runs)?))
}

pub fn eval(args: &EvalArgs, out: &mut dyn Write) -> CliResult {
    let tracklets = load_tracklets(&args.data)?;
    let file = File::open(&args.pred).map_err(io_err(&args.pred))?;
    let steps = read_steps(BufReader::new(file))?;
    let records = evaluate_steps(&tracklets, &steps)?;
    say(out, &format_table(&records))?;
    if let Some(path) = &args.records {
        write_records(path, &records)?;
    }
    if let Some(path) = &args.csv {
        write_text(path, &format_csv(&records))?;
    }
    Ok(())
}

/// Train and test suites for ablations: loaded when given, generated from
/// the config otherwise.
pub fn ablation_data(
    cfg: &RunConfig,
    train: Option<&Path>,
    test: Option<&Path>,
) -> CliResult<(Vec<Tracklet>, Vec<Tracklet>)> {
    let suite = cfg.suite();
    let train = match train {
        Some(p) => load_tracklets(p)?,
        None => generate_suite(&suite, cfg.train_tracklets, derive_seed(cfg.seed, 10), 0)?,
    };
    let test = match test {
        Some(p) => load_tracklets(p)?,
        None => generate_suite(
            &suite,
            cfg.test_tracklets,
            derive_seed(cfg.seed, 11),
            cfg.train_tracklets as u32,
        )?,
    };
    Ok((train, test))
}

pub fn ablation_records(
    cfg: &RunConfig,
    axis: AblationAxis,
    model: Option<DmtModel>,
    train: &[Tracklet],
    test: &[Tracklet],
) -> CliResult<Vec<MetricRecord>> {
    let model = match model {
        Some(m) => Some(m),
        None if !axis.retrains() => Some(fit_model(cfg, train, &mut std::io::sink())?),
        None if cfg.mpm == "lstm" => Some(DmtModel {
            net: None,
            lstm: Some(fit_lstm(cfg, train, &mut std::io::sink())?),
        }),
        None => None,
    };
    let lstm = model.as_ref().and_then(|m| m.lstm.as_ref());
    let spec = AblationSpec {
        axis,
        model: cfg.model(),
        train: cfg.train(),
        tracker: cfg.tracker(lstm, TrackMode::Full)?,
        mpm: cfg.mpm_params(),
        base: model.clone(),
    };
    let rows = run_ablation(&spec, train, test)?;
    Ok(rows.iter().map(|r| MetricRecord::new(&r.cell, &r.result)).collect())
}

pub fn ablate(args: &AblateArgs, out: &mut dyn Write) -> CliResult {
    let axis = AblationAxis::parse(&args.axis).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown axis {:?}; expected sample-dist, sample-count, template-strategy or mpm-variant",
            args.axis
        ))
    })?;
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let model = args.model.as_deref().map(DmtModel::load).transpose()?;
    let (train, test) = ablation_data(&cfg, args.train.as_deref(), args.test.as_deref())?;
    let records = ablation_records(&cfg, axis, model, &train, &test)?;
    let table = format_table(&records);
    write_text(&args.out, &table)?;
    say(out, &table)?;
    if let Some(path) = &args.records {
        write_records(path, &records)?;
    }
    if let Some(path) = &args.csv {
        write_text(path, &format_csv(&records))?;
    }
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> CliResult {
    let checks = gradient_suite(args.seed, args.corrupt)?;
    let mut text = String::new();
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        text.push_str(&format!("{:<14} {:.3e} {verdict}\n", c.name, c.worst));
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    if failed.is_empty() {
        text.push_str(&format!("all {} operations within {GRAD_TOL:e}\n", checks.len()));
    }
    say(out, &text)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}
