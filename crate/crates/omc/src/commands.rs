//! Subcommand implementations. Each writes its human-readable summary to the
//! given sink and returns a [`Failure`] that maps onto the exit code.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{debug, info, warn};
use omc_core::association::{PipelineConfig, Tracker};
use omc_core::frame::MotBox;
use omc_core::metrics::{evaluate, EvalReport, DEFAULT_IOU_GATE};
use omc_core::recheck::{aggregate, cross_correlate, normalize_cells, refine, EmbeddingSet, LearnedRefine, RefineWeights};
use omc_core::synth::{restoration_report, RestorationReport, Scenario, ScenarioConfig};
use omc_core::training_math::{finite_difference_check, gaussian_target};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, PipelineArgs, RefineMode, RunConfig};
use crate::frame_io::{self, ContainerReader, ContainerWriter, IoError};

/// Why a command stopped. The variant decides the exit code.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Acceptance(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Acceptance(_) => 3,
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(_) => Failure::Data(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

fn data(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

fn with_path(path: &Path) -> impl Fn(IoError) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "omc", version, about = "Double-check multi-object tracking on dense detector outputs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Track every frame of a container and write MOT results.
    Track(TrackArgs),
    /// Score a results file against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic scenario with controllable detector dropout.
    Synth(SynthArgs),
    /// Compare the analytic loss gradient with finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the tracker on one scenario for each value of a parameter.
    Sweep(SweepArgs),
    /// Export one frame's score and response maps as CSV for plotting.
    PlotData(PlotDataArgs),
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Input OMCF container.
    #[arg(long)]
    pub container: PathBuf,
    /// Output MOT results file.
    #[arg(long)]
    pub out: PathBuf,
    /// Public detections (MOT rows, pixels) that replace the detector's boxes.
    #[arg(long)]
    pub public: Option<PathBuf>,
    /// Learned refinement weights (single-frame OMCF file).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground-truth MOT file.
    #[arg(long)]
    pub gt: PathBuf,
    /// Results MOT file.
    #[arg(long)]
    pub results: PathBuf,
    /// Write the report as a one-row CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// IOU needed for a correspondence.
    #[arg(long, default_value_t = DEFAULT_IOU_GATE)]
    pub iou: f64,
    /// Dropped `frame,id` pairs from `synth`; enables the restoration report.
    #[arg(long)]
    pub dropped: Option<PathBuf>,
    /// Per-frame restoration breakdown CSV (needs --dropped).
    #[arg(long, requires = "dropped")]
    pub restoration_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    #[arg(long, default_value_t = 6)]
    pub targets: usize,
    /// Grid height in cells.
    #[arg(long, default_value_t = 24)]
    pub height: usize,
    /// Grid width in cells.
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    /// Per target-frame probability that the detector misses the target.
    #[arg(long, default_value_t = 0.3)]
    pub dropout: f64,
    /// Norm of the noise added to identity embeddings.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Highest cosine between a background embedding and any identity.
    #[arg(long, default_value_t = 0.3)]
    pub clutter: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = omc_core::frame::EMBED_DIM)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = omc_core::frame::FEAT_DIM)]
    pub feat_dim: usize,
}

impl ScenarioArgs {
    pub fn to_config(&self, pipeline: &PipelineConfig) -> ScenarioConfig {
        ScenarioConfig {
            num_targets: self.targets,
            height: self.height,
            width: self.width,
            frames: self.frames,
            dropout: self.dropout,
            embedding_noise: self.noise,
            clutter_similarity: self.clutter,
            seed: self.seed,
            embed_dim: self.embed_dim,
            feat_dim: self.feat_dim,
            bar: pipeline.bar,
            stride: f64::from(pipeline.stride),
            ..ScenarioConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory for `container.omcf`, `gt.txt` and `dropped.csv`.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Pixels per cell for the ground-truth rows.
    #[arg(long, default_value_t = 8.0)]
    pub stride: f32,
    /// Offset scale used to encode box centres.
    #[arg(long, default_value_t = 10.0)]
    pub hscale: f32,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
    pub instances: u32,
    /// Side of the square prediction map.
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
    pub size: u32,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Epsilon,
    Radius,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values; `inf` disables shrinking for `radius`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// CSV output with one row per value.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fail (exit 3) unless FP is non-increasing in epsilon, or FP at r=3
    /// does not exceed FP without shrinking.
    #[arg(long = "assert")]
    pub check: bool,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct PlotDataArgs {
    #[arg(long)]
    pub container: PathBuf,
    /// 1-based frame to export.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub frame: u32,
    /// CSV with columns `y,x,prob,m_s,m_p`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    match cli.command {
        Command::Track(a) => track(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Synth(a) => synth(&a, out),
        Command::Gradcheck(a) => gradcheck(&a, out),
        Command::Sweep(a) => sweep(&a, out),
        Command::PlotData(a) => plot_data(&a, out),
    }
}

fn load_weights(cfg: &RunConfig, path: Option<&Path>) -> Result<RefineWeights, Failure> {
    match (cfg.refine, path) {
        (RefineMode::Bypass, None) => Ok(RefineWeights::Bypass),
        (RefineMode::Bypass, Some(p)) => {
            warn!("ignoring {} because refinement is bypassed", p.display());
            Ok(RefineWeights::Bypass)
        }
        (RefineMode::Learned, None) => Err(Failure::Usage("--refine learned needs --weights".into())),
        (RefineMode::Learned, Some(p)) => {
            let tensors = frame_io::read_weights(p).map_err(with_path(p))?;
            let net = LearnedRefine::from_tensors(&tensors).map_err(|e| data(format!("{}: {e}", p.display())))?;
            Ok(RefineWeights::Learned(net))
        }
    }
}

pub fn track(a: &TrackArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let cfg = a.pipeline.resolve()?;
    let pipeline = cfg.pipeline()?;
    let weights = load_weights(&cfg, a.weights.as_deref())?;
    let public = match &a.public {
        Some(p) => Some(frame_io::read_mot_boxes(p).map_err(with_path(p))?),
        None => None,
    };
    let reader = ContainerReader::open(&a.container).map_err(with_path(&a.container))?;
    info!("tracking {} frames from {}", reader.frame_count(), a.container.display());

    let mut tracker = Tracker::new(pipeline, weights).map_err(|e| Failure::Usage(e.to_string()))?;
    let started = Instant::now();
    let (mut rows, mut frames, mut restored, mut skipped) = (Vec::new(), 0usize, 0usize, 0usize);
    let mut dets: Vec<MotBox> = Vec::new();
    for frame in reader {
        let frame = frame.map_err(with_path(&a.container))?;
        let public_dets = public.as_ref().map(|all| {
            dets.clear();
            dets.extend(all.iter().filter(|m| m.frame == frame.frame_index).copied());
            dets.as_slice()
        });
        let step = tracker.step(&frame, public_dets);
        if let Some(reason) = &step.skipped {
            warn!("frame {} skipped: {reason}", step.frame);
            skipped += 1;
        }
        debug!(
            "frame {}: {} base, {} transductive, {} tracks",
            step.frame,
            step.base_count,
            step.trans_count,
            step.tracks.len()
        );
        restored += step.tracks.iter().filter(|t| t.restored).count();
        rows.extend(tracker.to_mot_rows(&step));
        frames += 1;
    }
    let elapsed = started.elapsed().as_secs_f64();
    frame_io::write_mot_results(&rows, &a.out).map_err(with_path(&a.out))?;

    writeln!(out, "frames={frames}")?;
    writeln!(out, "boxes={}", rows.len())?;
    writeln!(out, "restored={restored}")?;
    writeln!(out, "skipped={skipped}")?;
    writeln!(out, "elapsed_s={elapsed:.3}")?;
    writeln!(out, "fps={:.1}", if elapsed > 0.0 { frames as f64 / elapsed } else { 0.0 })?;
    Ok(())
}

fn report_table(r: &EvalReport, restoration: Option<&RestorationReport>) -> String {
    let mut s = String::new();
    let mut row = |k: &str, v: String| writeln!(s, "{k:<10} {v:>10}").expect("writing to a String");
    row("MOTA", format!("{:.4}", r.mota));
    row("IDF1", format!("{:.4}", r.idf1));
    row("MT", format!("{:.4}", r.mt_ratio));
    row("ML", format!("{:.4}", r.ml_ratio));
    row("FP", r.fp.to_string());
    row("FN", r.fn_.to_string());
    row("IDSW", r.idsw.to_string());
    row("GT", r.gt_count.to_string());
    if let Some(rr) = restoration {
        row("dropped", rr.dropped.to_string());
        row("restored", rr.restored.to_string());
        row("recall", format!("{:.4}", rr.recall()));
    }
    s
}

pub const EVAL_CSV_HEADER: &str = "mota,idf1,mt,ml,fp,fn,idsw,gt,restored";

pub fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&a.iou) {
        return Err(Failure::Usage(format!("--iou must lie in [0, 1], got {}", a.iou)));
    }
    let gt = frame_io::read_mot_boxes(&a.gt).map_err(with_path(&a.gt))?;
    let pred = frame_io::read_mot_boxes(&a.results).map_err(with_path(&a.results))?;
    let restoration = match &a.dropped {
        Some(p) => {
            let pairs = frame_io::read_pairs(p).map_err(with_path(p))?;
            Some(restoration_report(&pred, &gt, &pairs))
        }
        None => None,
    };
    let restored = restoration.as_ref().map_or(0, |r| r.restored);
    let report = evaluate(&gt, &pred, a.iou, restored).map_err(|e| data(format!("{}: {e}", a.gt.display())))?;

    out.write_all(report_table(&report, restoration.as_ref()).as_bytes())?;
    if let Some(path) = &a.csv {
        let text = format!(
            "{EVAL_CSV_HEADER}\n{:.6},{:.6},{:.6},{:.6},{},{},{},{},{}\n",
            report.mota,
            report.idf1,
            report.mt_ratio,
            report.ml_ratio,
            report.fp,
            report.fn_,
            report.idsw,
            report.gt_count,
            report.restored_count
        );
        std::fs::write(path, text)?;
    }
    if let (Some(path), Some(rr)) = (&a.restoration_csv, &restoration) {
        let mut text = String::from("frame,dropped,restored\n");
        for (f, d, r) in &rr.per_frame {
            writeln!(text, "{f},{d},{r}").expect("writing to a String");
        }
        std::fs::write(path, text)?;
    }
    Ok(())
}

pub fn synth(a: &SynthArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let pipeline = PipelineConfig {
        stride: a.stride,
        bar: omc_core::detection::BarParams::new(a.hscale).map_err(|e| Failure::Usage(e.to_string()))?,
        ..PipelineConfig::default()
    };
    let scenario = Scenario::new(a.scenario.to_config(&pipeline)).map_err(|e| Failure::Usage(e.to_string()))?;
    std::fs::create_dir_all(&a.out_dir)?;
    let container = a.out_dir.join("container.omcf");
    let mut writer = ContainerWriter::create(&container, scenario.frame_count()).map_err(with_path(&container))?;
    for frame in scenario.frames() {
        writer.push(&frame).map_err(with_path(&container))?;
    }
    writer.finish().map_err(with_path(&container))?;

    let gt_path = a.out_dir.join("gt.txt");
    frame_io::write_mot_results(&scenario.ground_truth(), &gt_path).map_err(with_path(&gt_path))?;
    let dropped = scenario.dropped_pairs();
    let mut text = String::from("frame,id\n");
    for (f, id) in &dropped {
        writeln!(text, "{f},{id}").expect("writing to a String");
    }
    std::fs::write(a.out_dir.join("dropped.csv"), text)?;

    writeln!(out, "frames={}", scenario.frame_count())?;
    writeln!(out, "targets={}", a.scenario.targets)?;
    writeln!(out, "dropped={}", dropped.len())?;
    writeln!(out, "container={}", container.display())?;
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<(), Failure> {
    if !(a.step > 0.0 && a.step.is_finite()) {
        return Err(Failure::Usage(format!("--step must be positive, got {}", a.step)));
    }
    let size = a.size as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut worst = 0.0f64;
    for i in 0..a.instances {
        let n = rng.random_range(1..=4usize);
        let centers: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64)))
            .collect();
        let sizes: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(1.0..8.0), rng.random_range(1.0..8.0)))
            .collect();
        let sup = gaussian_target(&centers, &sizes, size, size).map_err(data)?;
        let target: Vec<f64> = sup.target.data().iter().map(|&v| f64::from(v)).collect();
        // Keep predictions away from the clamp so the difference quotient is smooth.
        let pred: Vec<f64> = (0..size * size).map(|_| rng.random_range(0.05..0.95)).collect();
        let check = finite_difference_check(&pred, &target, n, a.step).map_err(data)?;
        debug!("instance {i}: n={n} max_rel_err={:.3e}", check.max_rel_err);
        worst = worst.max(check.max_rel_err);
    }
    let pass = worst < a.tol;
    writeln!(out, "instances={}", a.instances)?;
    writeln!(out, "max_rel_err={worst:.3e}")?;
    writeln!(out, "result={}", if pass { "pass" } else { "fail" })?;
    if pass {
        Ok(())
    } else {
        Err(Failure::Acceptance(format!(
            "gradient check failed: {worst:.3e} >= {:.1e}",
            a.tol
        )))
    }
}

/// One sweep row.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub report: EvalReport,
    pub recall: f64,
}

pub const SWEEP_CSV_HEADER: &str = "value,mota,fp,fn,idsw,restored,recall";

/// Runs the tracker once per configuration on the same scenario.
pub fn run_scenario(scenario: &Scenario, pipeline: PipelineConfig, weights: RefineWeights) -> Result<(EvalReport, f64), Failure> {
    let outcome = omc_core::association::track_sequence(scenario.frames(), pipeline, weights, None).map_err(data)?;
    let gt = scenario.ground_truth();
    let report = evaluate(&gt, &outcome.rows, DEFAULT_IOU_GATE, outcome.restored).map_err(data)?;
    let recall = restoration_report(&outcome.rows, &gt, &scenario.dropped_pairs()).recall();
    Ok((report, recall))
}

fn sweep_config(base: &RunConfig, param: SweepParam, value: &str) -> Result<RunConfig, Failure> {
    let mut cfg = base.clone();
    let key = match param {
        SweepParam::Epsilon => "epsilon",
        SweepParam::Radius => "radius",
    };
    cfg.set(key, value.trim()).map_err(Failure::Usage)?;
    cfg.pipeline()?;
    Ok(cfg)
}

/// Direction checks on a finished sweep; `None` when they hold.
pub fn sweep_violation(param: SweepParam, rows: &[SweepRow]) -> Option<String> {
    match param {
        SweepParam::Epsilon => {
            let mut sorted: Vec<(f32, usize)> = rows
                .iter()
                .filter_map(|r| r.value.trim().parse::<f32>().ok().map(|v| (v, r.report.fp)))
                .collect();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            sorted.windows(2).find(|w| w[1].1 > w[0].1).map(|w| {
                format!("FP rises from {} at epsilon {} to {} at {}", w[0].1, w[0].0, w[1].1, w[1].0)
            })
        }
        SweepParam::Radius => {
            let fp = |pred: &dyn Fn(&str) -> bool| rows.iter().find(|r| pred(r.value.trim())).map(|r| r.report.fp);
            let at3 = fp(&|v| v == "3");
            let unshrunk = fp(&|v| v.eq_ignore_ascii_case("inf") || v.eq_ignore_ascii_case("none"));
            match (at3, unshrunk) {
                (Some(a), Some(b)) if a > b => Some(format!("FP {a} at r=3 exceeds {b} without shrinking")),
                _ => None,
            }
        }
    }
}

pub fn sweep(a: &SweepArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let base = a.pipeline.resolve()?;
    if base.refine == RefineMode::Learned {
        return Err(Failure::Usage("sweep runs with bypass refinement only".into()));
    }
    let configs = a
        .values
        .iter()
        .map(|v| sweep_config(&base, a.param, v))
        .collect::<Result<Vec<_>, _>>()?;
    let scenario = Scenario::new(a.scenario.to_config(&base.pipeline()?)).map_err(|e| Failure::Usage(e.to_string()))?;

    let mut rows = Vec::with_capacity(configs.len());
    for (value, cfg) in a.values.iter().zip(&configs) {
        let (report, recall) = run_scenario(&scenario, cfg.pipeline()?, RefineWeights::Bypass)?;
        info!("{value}: FP {} FN {}", report.fp, report.fn_);
        rows.push(SweepRow {
            value: value.trim().to_string(),
            report,
            recall,
        });
    }

    let mut csv = format!("{SWEEP_CSV_HEADER}\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{:.6},{},{},{},{},{:.6}",
            r.value, r.report.mota, r.report.fp, r.report.fn_, r.report.idsw, r.report.restored_count, r.recall
        )
        .expect("writing to a String");
    }
    out.write_all(csv.as_bytes())?;
    if let Some(path) = &a.out {
        std::fs::write(path, &csv)?;
    }
    if a.check {
        if let Some(msg) = sweep_violation(a.param, &rows) {
            return Err(Failure::Acceptance(msg));
        }
    }
    Ok(())
}

pub fn plot_data(a: &PlotDataArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let cfg = a.pipeline.resolve()?;
    let pipeline = cfg.pipeline()?;
    let weights = load_weights(&cfg, a.weights.as_deref())?;
    let reader = ContainerReader::open(&a.container).map_err(with_path(&a.container))?;
    if a.frame as usize > reader.frame_count() {
        return Err(Failure::Usage(format!(
            "--frame {} beyond the container's {} frames",
            a.frame,
            reader.frame_count()
        )));
    }
    let radius = pipeline.radius;
    let mut tracker = Tracker::new(pipeline, weights.clone()).map_err(|e| Failure::Usage(e.to_string()))?;
    for frame in reader {
        let frame = frame.map_err(with_path(&a.container))?;
        if frame.frame_index < a.frame {
            tracker.step(&frame, None);
            continue;
        }
        frame.validate().map_err(data)?;
        let mut f_id = frame.embed.clone();
        normalize_cells(&mut f_id);
        let mut e_prev = EmbeddingSet::new(f_id.channels());
        for t in tracker.tracklets() {
            e_prev.push(t.id, &t.embedding).map_err(data)?;
        }
        let stack = cross_correlate(&e_prev, &f_id).map_err(data)?;
        let m_s = aggregate(&stack, radius);
        let m_p = refine(&m_s, &frame.feat, &weights).map_err(data)?;

        let mut csv = String::from("y,x,prob,m_s,m_p\n");
        for y in 0..frame.height() {
            for x in 0..frame.width() {
                writeln!(
                    csv,
                    "{y},{x},{:.6},{:.6},{:.6}",
                    frame.prob.get(y, x, 0),
                    m_s.get(y, x, 0),
                    m_p.get(y, x, 0)
                )
                .expect("writing to a String");
            }
        }
        std::fs::write(&a.out, csv)?;
        writeln!(out, "frame={}", a.frame)?;
        writeln!(out, "tracklets={}", e_prev.len())?;
        writeln!(out, "cells={}", frame.height() * frame.width())?;
        return Ok(());
    }
    Err(data("container ended early"))
}
