//! Command-line driver: one subcommand per pipeline stage, all driven by a
//! single configuration file.
//!
//! Every artifact lives under the configured `work_dir` (or `--out`):
//!
//! ```text
//! manifest.csv                     video list joined with labels
//! crops/<stream>/<video>/*.png     aligned face crops
//! preprocess_<stream>.csv          per-video preprocessing report
//! checkpoints/<stream>/            epoch_NNN.ckpt, best, last, train_log.csv
//! results/<partition>/             frame scores, predictions, reports
//! ```
//!
//! Each run also writes `repro_<command>.json` (config hash, seed,
//! versions) into the directory it writes to.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use depstream::checkpoint::{self, Checkpoint};
use depstream::config::PipelineConfig;
use depstream::corpus::{self, Manifest};
use depstream::evalfuse::{
    self, EvalReport, FusionWeights, PredictionRow, Protocol, StreamLabel, StreamPrediction,
};
use depstream::geom::AlignmentMode;
use depstream::trainer::{self, TrainConfig};

/// Environment variable capping the number of worker threads.
pub const WORKERS_ENV: &str = "DEPSTREAM_WORKERS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const STREAMS: [AlignmentMode; 2] = [AlignmentMode::PoseIndependent, AlignmentMode::PoseDependent];

#[derive(Parser, Debug)]
#[command(name = "depstream", version, about = "Two-stream facial depression-severity estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Pipeline configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Work directory; overrides `work_dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the manifest, then detect, align and store face crops.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Only this stream (default: both).
        #[arg(long)]
        mode: Option<AlignmentMode>,
        /// Keep every n-th frame.
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Train one or both streams.
    Train {
        #[command(flatten)]
        common: Common,
        /// Only this stream (default: both).
        #[arg(long)]
        mode: Option<AlignmentMode>,
        /// Overrides `seed` from the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint (requires --mode).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score the evaluation partition with each stream's best checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Only this stream (default: both).
        #[arg(long)]
        mode: Option<AlignmentMode>,
    },
    /// Fuse stored per-stream scores into a predictions file.
    Fuse {
        #[command(flatten)]
        common: Common,
        /// Fusion weights `w_independent,w_dependent`.
        #[arg(long, value_parser = parse_weights)]
        weights: Option<FusionWeights>,
    },
    /// Predict with both streams and write the evaluation report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// `separated` (each video on its own), `single` (single-task corpora) or `joint` (per-subject mean over tasks).
        #[arg(long)]
        protocol: Option<Protocol>,
        /// Fusion weights `w_independent,w_dependent`.
        #[arg(long, value_parser = parse_weights)]
        weights: Option<FusionWeights>,
    },
    /// Recompute the evaluation report from stored per-frame scores only.
    Report {
        #[command(flatten)]
        common: Common,
        /// `separated` (each video on its own), `single` (single-task corpora) or `joint` (per-subject mean over tasks).
        #[arg(long)]
        protocol: Option<Protocol>,
        /// Fusion weights `w_independent,w_dependent`.
        #[arg(long, value_parser = parse_weights)]
        weights: Option<FusionWeights>,
    },
}

fn parse_weights(s: &str) -> Result<FusionWeights, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [a, b] = parts.as_slice() else {
        return Err("expected two comma-separated weights".into());
    };
    let a: f64 = a.parse().map_err(|e| format!("{a}: {e}"))?;
    let b: f64 = b.parse().map_err(|e| format!("{b}: {e}"))?;
    FusionWeights::new(a, b).map_err(|e| e.to_string())
}

/// Argument problems found after parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Runs one invocation (`argv[0]` is the program name) and returns its exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match worker_pool() {
        Ok(Some(pool)) => pool.install(|| dispatch(cli.command)),
        Ok(None) => dispatch(cli.command),
        Err(e) => Err(e),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}

fn worker_pool() -> anyhow::Result<Option<rayon::ThreadPool>> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Usage(format!("{WORKERS_ENV} must be a positive integer, got `{raw}`")))?;
    Ok(Some(rayon::ThreadPoolBuilder::new().num_threads(n).build()?))
}

struct Session {
    cfg: PipelineConfig,
    config_sha256: String,
    config_path: PathBuf,
}

impl Session {
    fn open(common: &Common) -> anyhow::Result<Self> {
        let bytes = std::fs::read(&common.config)
            .with_context(|| format!("reading {}", common.config.display()))?;
        let mut cfg = PipelineConfig::load(&common.config)?;
        if let Some(out) = &common.out {
            cfg.work_dir = out.clone();
        }
        Ok(Self {
            cfg,
            config_sha256: hex(&Sha256::digest(&bytes)),
            config_path: common.config.clone(),
        })
    }

    fn validate(&self) -> anyhow::Result<()> {
        self.cfg.validate().map_err(|e| Usage(e.to_string()).into())
    }

    fn results_dir(&self) -> PathBuf {
        self.cfg.work_dir.join("results").join(self.cfg.eval_partition.as_str())
    }

    fn stream_checkpoints(&self, stream: AlignmentMode) -> PathBuf {
        self.cfg.checkpoint_root().join(stream.as_str())
    }

    fn manifest(&self) -> anyhow::Result<Manifest> {
        let path = self.cfg.manifest_path();
        Manifest::load(&path).context("loading the manifest (run `preprocess` first)")
    }

    /// Writes the reproducibility header of this run into `dir`.
    fn stamp(&self, dir: &Path, command: &str, detail: serde_json::Value) -> anyhow::Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            command: &'a str,
            config: String,
            config_sha256: &'a str,
            effective_config_sha256: String,
            seed: u64,
            detail: serde_json::Value,
            versions: serde_json::Value,
        }
        let effective = self.cfg.to_toml()?;
        let header = Header {
            command,
            config: self.config_path.display().to_string(),
            config_sha256: &self.config_sha256,
            effective_config_sha256: hex(&Sha256::digest(effective.as_bytes())),
            seed: self.cfg.seed,
            detail,
            versions: serde_json::json!({
                "depstream": env!("CARGO_PKG_VERSION"),
                "checkpoint_format": checkpoint::VERSION,
                "target": format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
            }),
        };
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("repro_{command}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&header)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn streams(mode: Option<AlignmentMode>) -> Vec<AlignmentMode> {
    mode.map_or_else(|| STREAMS.to_vec(), |m| vec![m])
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Preprocess { common, mode, stride } => {
            let mut s = Session::open(&common)?;
            if let Some(n) = stride {
                s.cfg.stride = n;
            }
            s.validate()?;
            preprocess(&s, mode)
        }
        Command::Train { common, mode, seed, resume } => {
            let mut s = Session::open(&common)?;
            if let Some(seed) = seed {
                s.cfg.seed = seed;
            }
            s.validate()?;
            if resume.is_some() && mode.is_none() {
                return Err(Usage("--resume needs --mode".into()).into());
            }
            train(&s, mode, resume.as_deref())
        }
        Command::Predict { common, mode } => {
            let s = Session::open(&common)?;
            s.validate()?;
            predict(&s, mode)
        }
        Command::Fuse { common, weights } => {
            let mut s = Session::open(&common)?;
            apply_weights(&mut s, weights);
            s.validate()?;
            fuse(&s)
        }
        Command::Evaluate { common, protocol, weights } => {
            let mut s = Session::open(&common)?;
            apply_weights(&mut s, weights);
            if let Some(p) = protocol {
                s.cfg.protocol = p;
            }
            s.validate()?;
            evaluate(&s)
        }
        Command::Report { common, protocol, weights } => {
            let mut s = Session::open(&common)?;
            apply_weights(&mut s, weights);
            if let Some(p) = protocol {
                s.cfg.protocol = p;
            }
            s.validate()?;
            report(&s)
        }
    }
}

fn apply_weights(s: &mut Session, weights: Option<FusionWeights>) {
    if let Some(w) = weights {
        s.cfg.fusion_weights = [w.w_independent, w.w_dependent];
    }
}

fn preprocess(s: &Session, mode: Option<AlignmentMode>) -> anyhow::Result<()> {
    let cfg = &s.cfg;
    let manifest = corpus::build_manifest(&cfg.corpus_root, cfg.layout, &cfg.labels, cfg.stride, &cfg.corpus_name)?;
    std::fs::create_dir_all(&cfg.work_dir)
        .with_context(|| format!("creating {}", cfg.work_dir.display()))?;
    manifest.save(&cfg.manifest_path())?;
    let mut summary = serde_json::Map::new();
    for stream in streams(mode) {
        let report = corpus::extract_and_align(&manifest, &cfg.detector(), stream, cfg.crop_size, &cfg.crop_root())?;
        let path = cfg.work_dir.join(format!("preprocess_{stream}.csv"));
        report.write(std::fs::File::create(&path)?)?;
        for failed in report.failures() {
            eprintln!("warning: {stream}: no usable face in any sampled frame of `{failed}`");
        }
        eprintln!(
            "{stream}: {} crops from {} videos",
            report.total_processed(),
            report.videos.len()
        );
        summary.insert(stream.to_string(), report.total_processed().into());
    }
    s.stamp(
        &cfg.work_dir,
        "preprocess",
        serde_json::json!({ "stride": cfg.stride, "crops": summary }),
    )
}

fn train(s: &Session, mode: Option<AlignmentMode>, resume: Option<&Path>) -> anyhow::Result<()> {
    let mut detail = serde_json::Map::new();
    for stream in streams(mode) {
        let tc = TrainConfig::from_pipeline(&s.cfg, stream);
        let outcome = match resume {
            Some(path) => trainer::resume(&tc, path)?,
            None => trainer::train_stream(&tc)?,
        };
        if let Some(best) = outcome.best {
            eprintln!("{stream}: best epoch {} (dev MAE {:.4})", best.epoch, best.dev_mae);
            detail.insert(stream.to_string(), serde_json::to_value(best)?);
        }
    }
    s.stamp(&s.cfg.checkpoint_root(), "train", serde_json::Value::Object(detail))
}

fn frame_scores_path(dir: &Path, stream: AlignmentMode) -> PathBuf {
    dir.join(format!("{stream}_frame_scores.csv"))
}

fn predict_stream(s: &Session, manifest: &Manifest, stream: AlignmentMode) -> anyhow::Result<Vec<StreamPrediction>> {
    let dir = s.stream_checkpoints(stream);
    let path = checkpoint::resolve_marker(&dir, checkpoint::BEST_MARKER)?;
    let model = Checkpoint::load(&path)?.model()?;
    let mut videos = trainer::load_partition(manifest, &s.cfg.crop_root(), stream, s.cfg.eval_partition)?;
    videos.retain(|v| {
        if v.frames.is_empty() {
            eprintln!("warning: {stream}: `{}` has no crops and gets no prediction", v.video_id);
        }
        !v.frames.is_empty()
    });
    Ok(trainer::predict_videos(&model, &videos, stream, s.cfg.batch_size)?)
}

fn write_stream_scores(dir: &Path, stream: AlignmentMode, preds: &[StreamPrediction]) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = frame_scores_path(dir, stream);
    evalfuse::write_frame_scores(std::fs::File::create(&path)?, preds)
        .with_context(|| format!("writing {}", path.display()))
}

fn read_stream_scores(dir: &Path, stream: AlignmentMode) -> anyhow::Result<Vec<StreamPrediction>> {
    let path = frame_scores_path(dir, stream);
    let f = std::fs::File::open(&path)
        .with_context(|| format!("no {stream} scores at {} (run `predict` first)", path.display()))?;
    Ok(evalfuse::read_frame_scores(f, stream)?)
}

fn stream_rows(manifest: &Manifest, preds: &[StreamPrediction]) -> anyhow::Result<Vec<PredictionRow>> {
    preds
        .iter()
        .map(|p| {
            let record = manifest
                .get(&p.video_id)
                .with_context(|| format!("scored video `{}` is not in the manifest", p.video_id))?;
            Ok(PredictionRow {
                video_id: p.video_id.clone(),
                task: record.task,
                stream: StreamLabel::from(p.stream),
                score: p.video_score,
            })
        })
        .collect()
}

fn write_rows(path: &Path, rows: &[PredictionRow]) -> anyhow::Result<()> {
    evalfuse::write_predictions(std::fs::File::create(path)?, rows)
        .with_context(|| format!("writing {}", path.display()))
}

fn predict(s: &Session, mode: Option<AlignmentMode>) -> anyhow::Result<()> {
    let manifest = s.manifest()?;
    let dir = s.results_dir();
    let mut rows = Vec::new();
    for stream in streams(mode) {
        let preds = predict_stream(s, &manifest, stream)?;
        write_stream_scores(&dir, stream, &preds)?;
        rows.extend(stream_rows(&manifest, &preds)?);
    }
    write_rows(&dir.join("stream_predictions.csv"), &rows)?;
    s.stamp(&dir, "predict", serde_json::json!({ "partition": s.cfg.eval_partition }))
}

fn fuse(s: &Session) -> anyhow::Result<()> {
    let manifest = s.manifest()?;
    let dir = s.results_dir();
    let ind = stream_rows(&manifest, &read_stream_scores(&dir, AlignmentMode::PoseIndependent)?)?;
    let dep = stream_rows(&manifest, &read_stream_scores(&dir, AlignmentMode::PoseDependent)?)?;
    let weights = s.cfg.weights()?;
    let fused = evalfuse::fuse_prediction_rows(&ind, &dep, &weights)?;
    let mut rows = ind;
    rows.extend(dep);
    rows.extend(fused);
    write_rows(&dir.join("predictions.csv"), &rows)?;
    s.stamp(&dir, "fuse", serde_json::json!({ "weights": weights }))
}

fn build_report(s: &Session, manifest: &Manifest, dir: &Path) -> anyhow::Result<EvalReport> {
    let ind = read_stream_scores(dir, AlignmentMode::PoseIndependent)?;
    let dep = read_stream_scores(dir, AlignmentMode::PoseDependent)?;
    Ok(evalfuse::evaluate_predictions(
        manifest,
        s.cfg.eval_partition,
        &ind,
        &dep,
        &s.cfg.weights()?,
        s.cfg.protocol,
    )?)
}

fn write_report(dir: &Path, name: &str, report: &EvalReport) -> anyhow::Result<()> {
    std::fs::write(dir.join(format!("{name}.json")), report.to_json()? + "\n")?;
    report.write_error_distribution(std::fs::File::create(dir.join(format!("{name}_errors.csv")))?)?;
    let title = format!("Absolute error per unit, {} partition", report.partition.as_str());
    std::fs::write(
        dir.join(format!("{name}_errors.svg")),
        evalfuse::render_error_plot(&report.sorted_abs_errors, &title),
    )?;
    Ok(())
}

fn print_summary(report: &EvalReport) {
    for (name, m) in [
        ("pose_independent", report.pose_independent),
        ("pose_dependent", report.pose_dependent),
        ("fused", report.fused),
    ] {
        println!("{name:>16}  MAE {:.4}  RMSE {:.4}", m.mae, m.rmse);
    }
}

fn evaluate(s: &Session) -> anyhow::Result<()> {
    for stream in STREAMS {
        let dir = s.stream_checkpoints(stream);
        if checkpoint::resolve_marker(&dir, checkpoint::BEST_MARKER).is_err() {
            bail!(depstream::Error::Config(format!(
                "no trained {stream} checkpoint under {} (run `train` first)",
                dir.display()
            )));
        }
    }
    let manifest = s.manifest()?;
    let dir = s.results_dir();
    for stream in STREAMS {
        let preds = predict_stream(s, &manifest, stream)?;
        write_stream_scores(&dir, stream, &preds)?;
    }
    let report = build_report(s, &manifest, &dir)?;
    write_report(&dir, "evaluation", &report)?;
    print_summary(&report);
    s.stamp(
        &dir,
        "evaluate",
        serde_json::json!({ "protocol": s.cfg.protocol, "weights": report.weights }),
    )
}

fn report(s: &Session) -> anyhow::Result<()> {
    let manifest = s.manifest()?;
    let dir = s.results_dir();
    let report = build_report(s, &manifest, &dir)?;
    write_report(&dir, "report", &report)?;
    print_summary(&report);
    s.stamp(
        &dir,
        "report",
        serde_json::json!({ "protocol": s.cfg.protocol, "weights": report.weights }),
    )
}
