//! `nrkd` command implementations.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use nrkd_core::eval::{run_benchmark, Detector, EvalError, MmaDefinition, NetDetector, PluginDetector};
use nrkd_core::features::{FeaturePlugin, PluginError};
use nrkd_core::heatmap::{build_dataset, HeatmapError, Weighting};
use nrkd_core::loss::{LossCombination, LossError};
use nrkd_core::model::{build_model, ModelError, UNet};
use nrkd_core::plugin::write_keypoints_csv;
use nrkd_core::raster::{Raster, RasterError};
use nrkd_core::retrieval::{run_retrieval, RetrievalError};
use nrkd_core::synth::{generate_dataset, SynthError};
use nrkd_core::train::{train, TrainError, TrainReport};
use nrkd_core::util::config_hash;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Plugin(#[from] PluginError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// Stable machine-readable kind.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::Synth(_) => "synth",
            CliError::Heatmap(HeatmapError::EmptyHeatmap) => "empty_heatmap",
            CliError::Heatmap(_) => "heatmap",
            CliError::Train(TrainError::EmptyDataset(_)) => "empty_dataset",
            CliError::Train(TrainError::Diverged { .. }) => "diverged",
            CliError::Train(_) => "train",
            CliError::Model(_) => "model",
            CliError::Eval(EvalError::DatasetFormat { .. }) => "dataset_format",
            CliError::Eval(_) => "eval",
            CliError::Retrieval(_) => "retrieval",
            CliError::Plugin(PluginError::Timeout(_)) => "plugin_timeout",
            CliError::Plugin(_) => "plugin",
            CliError::Raster(_) => "raster",
            CliError::Loss(_) => "loss",
            CliError::Io { .. } => "io",
        }
    }

    /// Single-line JSON object for stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string().replace('\n', " ") }).to_string()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "nrkd", version, about = "Descriptor-specialized keypoint detection for non-rigid matching")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Feature plugin as `name=command` or `builtin`.
    #[arg(long, global = true)]
    pub plugin: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic triplet dataset.
    Synth(SynthArgs),
    /// Build matching heatmaps for a dataset.
    BuildGt(BuildGtArgs),
    /// Train the detector.
    Train(TrainArgs),
    /// Run the detector on an image or a directory of images.
    Detect(DetectArgs),
    /// Benchmark a detector on a pair dataset.
    Eval(EvalArgs),
    /// Bag-of-visual-words retrieval.
    Retrieve(RetrieveArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub anchors: Option<PathBuf>,
    #[arg(long)]
    pub only_homography: bool,
}

#[derive(Debug, Args)]
pub struct BuildGtArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Set every heatmap peak to 1.
    #[arg(long)]
    pub equal_weights: bool,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub min_peaks: Option<usize>,
    /// Train on one warped view per triplet.
    #[arg(long)]
    pub single_branch: bool,
    /// all, cossim_simple, cossim_peak, simple_peak, cossim or simple.
    #[arg(long)]
    pub loss: Option<String>,
    /// Start from these weights.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub num_kpts: Option<usize>,
    #[arg(long)]
    pub min_score: Option<f32>,
    #[arg(long)]
    pub nms_window: Option<usize>,
    #[arg(long)]
    pub edge_ratio: Option<f64>,
    #[arg(long)]
    pub no_subpixel: bool,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Image file or directory.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub extract: ExtractArgs,
    /// Also write the score map as a 16-bit PNG.
    #[arg(long)]
    pub save_score_map: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Detector weights; the plugin's own detector when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub num_kpts: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// MMA over one-to-one repeatable pairs instead of putative matches.
    #[arg(long)]
    pub mma_possible: bool,
    #[arg(long)]
    pub no_viz: bool,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Report accuracy at this K as well.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub num_kpts: Option<usize>,
    #[arg(long)]
    pub idf: bool,
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(common: &Common, command: &Command) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    if let Some(p) = &common.plugin {
        cfg.plugin.spec = p.clone();
    }
    match command {
        Command::Synth(a) => {
            let s = &mut cfg.synth;
            s.count = a.count.unwrap_or(s.count);
            s.width = a.width.unwrap_or(s.width);
            s.height = a.height.unwrap_or(s.height);
            if a.anchors.is_some() {
                s.anchors_dir = a.anchors.clone();
            }
            s.warp.only_homography |= a.only_homography;
        }
        Command::BuildGt(a) => {
            let h = &mut cfg.heatmap;
            if a.equal_weights {
                h.weighting = Weighting::Equal;
            }
            h.ratio = a.ratio.unwrap_or(h.ratio);
            h.tolerance = a.tol.unwrap_or(h.tolerance);
        }
        Command::Train(a) => {
            let t = &mut cfg.train;
            if a.steps.is_some() {
                t.max_steps = a.steps;
            }
            t.epochs = a.epochs.unwrap_or(t.epochs);
            t.batch = a.batch.unwrap_or(t.batch);
            t.lr = a.lr.unwrap_or(t.lr);
            t.min_peaks = a.min_peaks.unwrap_or(t.min_peaks);
            t.checkpoint_every = a.checkpoint_every.unwrap_or(t.checkpoint_every);
            if a.single_branch {
                t.siamese = false;
            }
            if let Some(l) = &a.loss {
                cfg.loss.combination = parse_combination(l)?;
            }
        }
        Command::Detect(a) => apply_extract(&mut cfg, &a.extract),
        Command::Eval(a) => {
            let e = &mut cfg.eval;
            e.num_kpts = a.num_kpts.unwrap_or(e.num_kpts);
            e.tol = a.tol.unwrap_or(e.tol);
            if a.mma_possible {
                e.mma_definition = MmaDefinition::Possible;
            }
            if a.no_viz {
                e.visualize = false;
            }
        }
        Command::Retrieve(a) => {
            let r = &mut cfg.retrieval;
            r.vocab_size = a.vocab_size.unwrap_or(r.vocab_size);
            r.num_kpts = a.num_kpts.unwrap_or(r.num_kpts);
            r.idf |= a.idf;
            if let Some(k) = a.k {
                if !r.ks.contains(&k) {
                    r.ks.push(k);
                    r.ks.sort_unstable();
                }
            }
        }
    }
    Ok(cfg)
}

fn apply_extract(cfg: &mut RunConfig, a: &ExtractArgs) {
    let e = &mut cfg.extract;
    e.top_k = a.num_kpts.unwrap_or(e.top_k);
    e.min_score = a.min_score.unwrap_or(e.min_score);
    e.nms_window = a.nms_window.unwrap_or(e.nms_window);
    e.edge_ratio = a.edge_ratio.unwrap_or(e.edge_ratio);
    if a.no_subpixel {
        e.subpixel = false;
    }
}

fn parse_combination(s: &str) -> Result<LossCombination, CliError> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| CliError::Usage(format!("unknown loss combination `{s}`")))
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: String,
    config: &'a RunConfig,
}

pub const RUN_FILE: &str = "run.json";

fn write_run(dir: &Path, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let rec = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config_hash: config_hash(cfg),
        config: cfg,
    };
    let p = dir.join(RUN_FILE);
    std::fs::write(&p, serde_json::to_string_pretty(&rec).expect("run record serializes")).map_err(io_err(&p))
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<UNet, CliError> {
    Ok(UNet::load(path, Some(&cfg.model))?)
}

fn detector(weights: Option<&Path>, cfg: &RunConfig, plugin: &Arc<dyn FeaturePlugin>) -> Result<Box<dyn Detector>, CliError> {
    Ok(match weights {
        Some(w) => Box::new(NetDetector {
            model: load_model(w, cfg)?,
            extract: cfg.extract.clone(),
        }),
        None => Box::new(PluginDetector(plugin.clone())),
    })
}

fn image_inputs(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if input.is_dir() {
        Ok(nrkd_core::retrieval::list_images(input)?)
    } else if input.exists() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(CliError::Usage(format!("input {} does not exist", input.display())))
    }
}

fn with_jobs<T>(jobs: usize, f: impl FnOnce() -> Result<T, CliError> + Send) -> Result<T, CliError>
where
    T: Send,
{
    if jobs == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(f)
}

/// Outcome of one command, for callers that want more than the files.
#[derive(Debug)]
pub enum Outcome {
    Synth { triplets: usize },
    BuildGt { built: usize, skipped: usize },
    Train(TrainReport),
    Detect { images: usize },
    Eval(nrkd_core::eval::EvalReport),
    Retrieve(nrkd_core::retrieval::RetrievalReport),
}

pub fn execute(cli: Cli) -> Result<Outcome, CliError> {
    let cfg = resolve_config(&cli.common, &cli.command)?;
    let jobs = cfg.jobs;
    with_jobs(jobs, move || run_command(&cli.command, &cfg))
}

fn run_command(command: &Command, cfg: &RunConfig) -> Result<Outcome, CliError> {
    match command {
        Command::Synth(a) => {
            let m = generate_dataset(&cfg.synth, cfg.seed, &a.out)?;
            write_run(&a.out, "synth", cfg)?;
            log::info!("wrote {} triplets to {}", m.entries.len(), a.out.display());
            Ok(Outcome::Synth {
                triplets: m.entries.len(),
            })
        }
        Command::BuildGt(a) => {
            let plugin = cfg.plugin.resolve()?.instantiate();
            let s = build_dataset(&a.dataset, plugin.as_ref(), &cfg.heatmap)?;
            write_run(&a.dataset, "build-gt", cfg)?;
            Ok(Outcome::BuildGt {
                built: s.built.len(),
                skipped: s.skipped.len(),
            })
        }
        Command::Train(a) => {
            let mut model = match &a.init {
                Some(p) => load_model(p, cfg)?,
                None => build_model(&cfg.model, cfg.seed)?,
            };
            write_run(&a.out, "train", cfg)?;
            let report = train(&a.dataset, &mut model, &cfg.train, &cfg.loss, cfg.seed, Some(&a.out))?;
            let p = a.out.join("train_report.json");
            let summary = serde_json::json!({
                "steps": report.steps,
                "triplets": report.triplets,
                "discarded": report.discarded,
                "images_per_step": report.images_per_step,
                "final_loss": report.final_loss(),
            });
            std::fs::write(&p, serde_json::to_string_pretty(&summary).expect("serializes")).map_err(io_err(&p))?;
            Ok(Outcome::Train(report))
        }
        Command::Detect(a) => {
            let net = NetDetector {
                model: load_model(&a.weights, cfg)?,
                extract: cfg.extract.clone(),
            };
            let inputs = image_inputs(&a.input)?;
            std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
            for p in &inputs {
                let img = Raster::load(p)?;
                let (s, kps) = net.score_and_extract(&img, cfg.extract.top_k)?;
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                write_keypoints_csv(&a.out.join(format!("{stem}.csv")), &kps)?;
                if a.save_score_map {
                    s.save_png16(a.out.join(format!("{stem}_score.png")))?;
                }
            }
            write_run(&a.out, "detect", cfg)?;
            Ok(Outcome::Detect { images: inputs.len() })
        }
        Command::Eval(a) => {
            let plugin = cfg.plugin.resolve()?.instantiate();
            let det = detector(a.weights.as_deref(), cfg, &plugin)?;
            let report = run_benchmark(&a.dataset, det.as_ref(), plugin.as_ref(), &cfg.eval, cfg.seed, Some(&a.out))?;
            write_run(&a.out, "eval", cfg)?;
            Ok(Outcome::Eval(report))
        }
        Command::Retrieve(a) => {
            let plugin = cfg.plugin.resolve()?.instantiate();
            let det = detector(a.weights.as_deref(), cfg, &plugin)?;
            let (_, report) = run_retrieval(
                &a.gallery,
                &a.query,
                det.as_ref(),
                plugin.as_ref(),
                &cfg.retrieval,
                cfg.seed,
                Some(&a.out),
            )?;
            write_run(&a.out, "retrieve", cfg)?;
            Ok(Outcome::Retrieve(report))
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<Outcome, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string().trim().replace('\n', " ")))?;
    execute(cli)
}
