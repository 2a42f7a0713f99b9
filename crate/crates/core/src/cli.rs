//! Command-line entry points: train, detect, eval, simulate, calibrate-h,
//! serve and replay-journal.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::continual::UpdatePolicy;
use crate::detector::{calibrate_threshold, AlarmRecord, Detector, DetectorConfig, TracePoint};
use crate::engine::{AlarmIds, StreamEngine};
use crate::features::{FeatureWeights, FrameFeatures};
use crate::ingest::{self, IngestConfig, ParseMode};
use crate::journal::{read_journal, replay, ModelHandle};
use crate::metrics::{evaluate, ScoreMode};
use crate::service::{self, ServiceConfig};
use crate::simgen::{self, AnomalyGenerator, AnomalySegment, ScenarioConfig};
use crate::store::{NominalModel, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "seqwatch", version, about = "Sequential kNN anomaly detection over feature streams")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a nominal model from a feature-frame file.
    Train(TrainArgs),
    /// Run a stream through a model; write the statistic trace and alarms.
    Detect(DetectArgs),
    /// Score a trace and alarm file against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic stream and its ground truth.
    Simulate(SimulateArgs),
    /// Choose the alarm threshold for a target false-alarm period on nominal data.
    CalibrateH(CalibrateArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Apply a journal to an initial model.
    ReplayJournal(ReplayArgs),
}

#[derive(Debug, Clone, Args)]
pub struct WeightArgs {
    /// Motion weight.
    #[arg(long, default_value_t = 1.0, env = "SEQWATCH_W_MOTION")]
    pub w_motion: f64,
    /// Location weight.
    #[arg(long, default_value_t = 1.0, env = "SEQWATCH_W_LOCATION")]
    pub w_location: f64,
    /// Appearance weight.
    #[arg(long, default_value_t = 1.0, env = "SEQWATCH_W_APPEARANCE")]
    pub w_appearance: f64,
    /// Skip malformed input lines instead of aborting.
    #[arg(long)]
    pub lenient: bool,
}

impl WeightArgs {
    pub fn ingest_config(&self) -> Result<IngestConfig> {
        Ok(IngestConfig {
            weights: FeatureWeights::new(self.w_motion, self.w_location, self.w_appearance)?,
            mode: if self.lenient { ParseMode::Lenient } else { ParseMode::Strict },
            n_classes: None,
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct DetectorArgs {
    /// Alarm threshold on the statistic.
    #[arg(long, default_value_t = 1e6, env = "SEQWATCH_H")]
    pub h: f64,
    /// Strictly decreasing steps that close an alarm.
    #[arg(long, default_value_t = 5, env = "SEQWATCH_N_CONSEC")]
    pub n_consec: u32,
    /// Evidence for object-free frames (default: -d_alpha^m).
    #[arg(long, env = "SEQWATCH_DELTA_FLOOR", allow_hyphen_values = true)]
    pub delta_floor: Option<f64>,
    /// Symmetric clamp on the evidence.
    #[arg(long, default_value_t = 1e6, env = "SEQWATCH_EVIDENCE_CAP")]
    pub evidence_cap: f64,
    /// Distance exponent (default: model dimension).
    #[arg(long, env = "SEQWATCH_EXPONENT")]
    pub exponent: Option<u32>,
    /// Evidence threshold of the single-shot baseline.
    #[arg(long, default_value_t = 0.0, env = "SEQWATCH_SINGLE_SHOT_THRESHOLD", allow_hyphen_values = true)]
    pub single_shot_threshold: f64,
    /// Recent trace points kept per stream.
    #[arg(long, default_value_t = 1024, env = "SEQWATCH_HISTORY_LEN")]
    pub history_len: usize,
}

impl DetectorArgs {
    pub fn config(&self) -> DetectorConfig {
        DetectorConfig {
            h: self.h,
            n_consec: self.n_consec,
            delta_floor: self.delta_floor,
            evidence_cap: self.evidence_cap,
            exponent: self.exponent,
            single_shot_threshold: self.single_shot_threshold,
            history_len: self.history_len,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PolicyArgs {
    /// Disable automatic insertion of zero-statistic vectors.
    #[arg(long, env = "SEQWATCH_NO_AUTO_INSERT")]
    pub no_auto_insert: bool,
    /// Insert every n-th vector seen while the statistic is zero.
    #[arg(long, default_value_t = 30, env = "SEQWATCH_AUTO_INSERT_STRIDE")]
    pub auto_insert_stride: u64,
    /// Default fraction of a false alarm's vectors folded into the model.
    #[arg(long, default_value_t = 0.2, env = "SEQWATCH_FEEDBACK_FRACTION")]
    pub feedback_sample_fraction: f64,
    /// Seed for feedback sampling.
    #[arg(long, default_value_t = 0, env = "SEQWATCH_POLICY_SEED")]
    pub policy_seed: u64,
}

impl PolicyArgs {
    pub fn policy(&self) -> UpdatePolicy {
        UpdatePolicy {
            auto_insert_on_zero: !self.no_auto_insert,
            auto_insert_stride: self.auto_insert_stride,
            feedback_sample_fraction: self.feedback_sample_fraction,
            rng_seed: self.policy_seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Nominal feature-frame file.
    #[arg(long)]
    pub features: PathBuf,
    /// Output model file.
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Fraction of vectors used for calibration.
    #[arg(long, default_value_t = 0.2)]
    pub split_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep at most this many reference vectors (oldest evicted first).
    #[arg(long)]
    pub max_reference_size: Option<usize>,
    /// Fit per-dimension min-max scaling on the training vectors.
    #[arg(long)]
    pub normalize: bool,
    #[command(flatten)]
    pub input: WeightArgs,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Per-frame `(t, delta, s)` output.
    #[arg(long)]
    pub trace_out: PathBuf,
    /// Alarm records output.
    #[arg(long)]
    pub alarms_out: PathBuf,
    #[arg(long, default_value = "default")]
    pub stream_id: String,
    /// Frames buffered between the reader and the detector.
    #[arg(long, default_value_t = 1024)]
    pub buffer: usize,
    #[command(flatten)]
    pub detector: DetectorArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub input: WeightArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub alarms: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// `statistic` (s_t) or `evidence` (delta_t).
    #[arg(long, default_value = "statistic")]
    pub score: ScoreMode,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
    /// Write the ROC curve as a two-column table.
    #[arg(long)]
    pub roc_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output feature-frame file.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Ground-truth sidecar file.
    #[arg(long)]
    pub gt_out: PathBuf,
    /// Full scenario as JSON; the flags below are ignored when given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub frames: u64,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3.0)]
    pub objects_per_frame: f64,
    /// Distance of the injected anomaly cluster; 0 disables it.
    #[arg(long, default_value_t = 0.0)]
    pub anomaly_offset: f64,
    #[arg(long, default_value_t = 1000)]
    pub anomaly_start: u64,
    #[arg(long, default_value_t = 50)]
    pub anomaly_len: u64,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Held-out nominal feature-frame file.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Target frames between false alarms; defaults to the stream length.
    #[arg(long)]
    pub target_period: Option<f64>,
    #[command(flatten)]
    pub detector: DetectorArgs,
    #[command(flatten)]
    pub input: WeightArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080", env = "SEQWATCH_LISTEN")]
    pub listen: SocketAddr,
    #[arg(long, env = "SEQWATCH_MODEL")]
    pub model: PathBuf,
    /// Append-only journal; replayed onto the model at startup if present.
    #[arg(long, env = "SEQWATCH_JOURNAL")]
    pub journal: Option<PathBuf>,
    /// Require `Authorization: Bearer <token>`.
    #[arg(long, env = "SEQWATCH_AUTH_TOKEN", hide_env_values = true)]
    pub auth_token: Option<String>,
    /// Feature-frame file whose objects serve as default recalibration set.
    #[arg(long, env = "SEQWATCH_CALIBRATION")]
    pub calibration: Option<PathBuf>,
    #[command(flatten)]
    pub detector: DetectorArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub input: WeightArgs,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Model the journal was started from.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub journal: PathBuf,
    /// Write the reconstructed model here.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Compare the result with this model and fail on mismatch.
    #[arg(long)]
    pub expect: Option<PathBuf>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn read_frames(path: &Path, cfg: IngestConfig) -> Result<Vec<FrameFeatures>> {
    let parsed = ingest::parse_stream(open(path)?, cfg).with_context(|| format!("reading {}", path.display()))?;
    for e in &parsed.skipped {
        tracing::warn!("skipped {e}");
    }
    Ok(parsed.frames)
}

/// Result of running one stream through a fresh engine.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectOutput {
    pub trace: Vec<TracePoint>,
    pub alarms: Vec<AlarmRecord>,
}

/// The `detect` pipeline on in-memory frames. Alarm ids start at 1, as in
/// the service.
pub fn detect_frames<'a>(
    model: NominalModel,
    frames: impl IntoIterator<Item = &'a FrameFeatures>,
    cfg: &DetectorConfig,
    policy: &UpdatePolicy,
    stream_id: &str,
) -> Result<DetectOutput> {
    let handle = Arc::new(ModelHandle::new(model, None));
    let mut engine = StreamEngine::new(stream_id, handle, cfg.clone(), policy.clone(), AlarmIds::starting_at(1))?;
    let mut out = DetectOutput { trace: Vec::new(), alarms: Vec::new() };
    for f in frames {
        let o = engine.process(f)?;
        out.trace.push(o.trace_point());
        out.alarms.extend(o.closed);
    }
    if let Some(open) = engine.open_alarm() {
        out.alarms.push(open.clone());
    }
    Ok(out)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Detect(a) => detect(a),
        Command::Eval(a) => eval(a),
        Command::Simulate(a) => simulate(a),
        Command::CalibrateH(a) => calibrate(a),
        Command::Serve(a) => serve(a),
        Command::ReplayJournal(a) => replay_journal(a),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let frames = read_frames(&a.features, a.input.ingest_config()?)?;
    let vectors: Vec<_> = frames.into_iter().flat_map(|f| f.objects).collect();
    let cfg = TrainConfig {
        k: a.k,
        alpha: a.alpha,
        split_fraction: a.split_fraction,
        rng_seed: a.seed,
        max_reference_size: a.max_reference_size,
        normalize: a.normalize,
    };
    let model = NominalModel::train(&vectors, &cfg).context("training failed")?;
    model.save_to_path(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let s = model.stats();
    println!("vectors  {}", vectors.len());
    println!("M1       {}", s.calibration_size);
    println!("M2       {}", s.reference_size);
    println!("dim      {}", s.dim);
    println!("k        {}", s.k);
    println!("alpha    {}", s.alpha);
    println!("d_alpha  {}", s.d_alpha);
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let model = NominalModel::load_from_path(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let cfg = a.detector.config();
    let handle = Arc::new(ModelHandle::new(model, None));
    let mut engine =
        StreamEngine::new(&a.stream_id, handle, cfg, a.policy.policy(), AlarmIds::starting_at(1))?;
    let (rx, reader) = ingest::spawn_reader(open(&a.features)?, a.input.ingest_config()?, a.buffer.max(1));
    let mut trace = Vec::new();
    let mut alarms = Vec::new();
    for frame in rx {
        let frame = frame.with_context(|| format!("reading {}", a.features.display()))?;
        let o = engine.process(&frame).with_context(|| format!("frame {}", frame.t))?;
        trace.push(o.trace_point());
        alarms.extend(o.closed);
    }
    let summary = reader.join().map_err(|_| anyhow::anyhow!("reader thread panicked"))?;
    if let Some(open) = engine.open_alarm() {
        alarms.push(open.clone());
    }
    ingest::write_trace(create(&a.trace_out)?, &a.stream_id, &trace)?;
    ingest::write_alarms(create(&a.alarms_out)?, &a.stream_id, &alarms)?;
    println!("frames   {}", trace.len());
    println!("skipped  {}", summary.skipped);
    println!("alarms   {}", alarms.len());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let trace = ingest::read_trace(open(&a.trace)?)?;
    let alarms = ingest::read_alarms(open(&a.alarms)?)?;
    let gt = ingest::load_ground_truth(open(&a.gt)?)?;
    let report = evaluate(&trace, &alarms, &gt, a.score)?;
    print!("{}", report.to_text());
    if let Some(p) = &a.json_out {
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, &report)?;
        w.write_all(b"\n")?;
    }
    if let Some(p) = &a.roc_out {
        create(p)?.write_all(report.roc_table().as_bytes())?;
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => serde_json::from_reader(open(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => {
            let mut cfg = ScenarioConfig::desk(a.classes, a.frames, a.seed);
            cfg.objects_per_frame = a.objects_per_frame;
            if a.anomaly_offset > 0.0 {
                if a.anomaly_len == 0 || a.anomaly_start + a.anomaly_len > a.frames {
                    bail!("anomaly [{}, +{}) does not fit in {} frames", a.anomaly_start, a.anomaly_len, a.frames);
                }
                let cluster = cfg.novel_cluster(a.anomaly_offset, 0.3);
                cfg.anomaly_segments = vec![AnomalySegment {
                    start: a.anomaly_start,
                    end: a.anomaly_start + a.anomaly_len - 1,
                    generator: AnomalyGenerator::NovelCluster { cluster },
                }];
            }
            cfg
        }
    };
    let scenario = simgen::generate(&cfg)?;
    ingest::write_stream(create(&a.out)?, &scenario.frames, &cfg.weights, Some(cfg.n_classes))?;
    ingest::write_ground_truth(create(&a.gt_out)?, &scenario.ground_truth)?;
    println!("frames   {}", scenario.frames.len());
    println!("objects  {}", scenario.objects().count());
    println!("anomalous intervals {:?}", scenario.ground_truth.intervals);
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let model = NominalModel::load_from_path(&a.model)?;
    let frames = read_frames(&a.features, a.input.ingest_config()?)?;
    let cfg = a.detector.config();
    let det = Detector::new(cfg.clone(), model.d_alpha(), model.dim())?;
    let mut deltas = Vec::with_capacity(frames.len());
    for f in &frames {
        deltas.push(det.frame_evidence(&model.knn_distances(&f.objects)?)?);
    }
    let period = a.target_period.unwrap_or(deltas.len() as f64);
    let h = calibrate_threshold(&deltas, &cfg, period)?;
    println!("frames         {}", deltas.len());
    println!("target period  {period}");
    println!("h              {h}");
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = ServiceConfig {
        listen: a.listen,
        model_path: a.model,
        detector: a.detector.config(),
        policy: a.policy.policy(),
        weights: a.input.ingest_config()?.weights,
        auth_token: a.auth_token,
        journal_path: a.journal,
        calibration_path: a.calibration,
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(service::serve(cfg))
}

fn replay_journal(a: ReplayArgs) -> Result<()> {
    let mut model = NominalModel::load_from_path(&a.model)?;
    let entries = read_journal(&a.journal)?;
    let applied = replay(&mut model, &entries)?;
    let s = model.stats();
    println!("entries applied  {applied}");
    println!("reference size   {}", s.reference_size);
    println!("insert count     {}", s.insert_count);
    println!("d_alpha          {}", s.d_alpha);
    if let Some(p) = &a.out {
        model.save_to_path(p)?;
    }
    if let Some(p) = &a.expect {
        let expected = NominalModel::load_from_path(p)?;
        if !model.content_eq(&expected) {
            bail!("replayed model differs from {}", p.display());
        }
        println!("matches          {}", p.display());
    }
    Ok(())
}
