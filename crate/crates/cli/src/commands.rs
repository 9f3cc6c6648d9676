use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use sketchclean::loss::LossConfig;
use sketchclean::metrics::{write_metrics_csv, write_summary_json};
use sketchclean::model::{load_checkpoint, save_checkpoint};
use sketchclean::retrieval::{ab_compare, RetrievalIndex};
use sketchclean::synth::{make_dataset, read_dataset, write_dataset, DefectProfile, TrainingPair};
use sketchclean::train::{
    clean_raster, evaluate_detailed, split_dataset, train_run, RunOptions, TrainConfig,
    CHECKPOINT_FILE,
};

use crate::service::{self, ServiceState};
use crate::{pipeline, CliError};

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "sketchclean", version, about = "Clean rough sketches and measure retrieval gains")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of rough/clean pairs.
    Synth(SynthArgs),
    /// Train a cleaning network on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Clean one image.
    Clean(CleanArgs),
    /// Rank indexed items against a query image.
    Retrieve(RetrieveArgs),
    /// Build a retrieval index from a dataset's clean sketches.
    Index(IndexArgs),
    /// Compare retrieval with rough queries against cleaned queries.
    Compare(CompareArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Profile {
    Identity,
    Moderate,
    Severe,
}

impl Profile {
    fn defects(self) -> DefectProfile {
        match self {
            Profile::Identity => DefectProfile::identity(),
            Profile::Moderate => DefectProfile::moderate(),
            Profile::Severe => DefectProfile::severe(),
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Side length of each raster.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Profile::Moderate)]
    pub profile: Profile,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config (JSON); defaults are used for missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Run directory for checkpoints, history and the split.
    #[arg(long)]
    pub out: PathBuf,
    /// Also copy the final checkpoint here.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the state saved in the run directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Config whose loss settings drive the BDCN metric.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Per-pair metrics CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Summary JSON (also printed to stdout).
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CleanArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Written as PNG.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Clean the query with this checkpoint first.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = service::DEFAULT_K)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output index file.
    #[arg(long)]
    pub index: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    /// Query pairs; their rough sketches and categories are used.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = service::DEFAULT_K)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Dataset directory serving item thumbnails.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8787)]
    pub port: u16,
    /// Per-request deadline.
    #[arg(long, default_value_t = 30_000)]
    pub timeout_ms: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Clean(a) => clean(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Index(a) => index(a),
        Command::Compare(a) => compare(a),
        Command::Serve(a) => serve(a),
    }
}

fn load_pairs(dir: &Path) -> Result<Vec<TrainingPair>> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    let pairs = read_dataset(dir)?;
    if pairs.is_empty() {
        return Err(CliError::Usage(format!("dataset {} is empty", dir.display())));
    }
    Ok(pairs)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn synth(a: SynthArgs) -> Result<()> {
    let pairs = make_dataset(a.n, a.size, a.size, &a.profile.defects(), a.seed)?;
    write_dataset(&pairs, &a.out)?;
    log::info!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let pairs = load_pairs(&a.dataset)?;
    let (train_set, test_set) = split_dataset(&pairs, cfg.effective_split_ratio(), cfg.seed)?;
    fs::create_dir_all(&a.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", a.out.display())))?;
    cfg.save(a.out.join("config.json"))?;
    let ids = |v: &[TrainingPair]| v.iter().map(|p| p.id.clone()).collect::<Vec<_>>();
    let split = json!({ "train": ids(&train_set), "test": ids(&test_set) });
    write_file(&a.out.join("split.json"), to_json(&split).as_bytes())?;

    let opts = RunOptions {
        out_dir: Some(a.out.clone()),
        resume: a.resume,
    };
    let (net, history) = train_run(&train_set, &test_set, &cfg, &opts)?;
    save_checkpoint(&net, a.out.join(CHECKPOINT_FILE))?;
    if let Some(p) = &a.checkpoint {
        save_checkpoint(&net, p)?;
    }
    if let Some(last) = history.epochs.last() {
        log::info!("finished epoch {} with loss {:.6}", last.epoch, last.train_loss);
    }
    if !test_set.is_empty() {
        let (summary, rows) = evaluate_detailed(&net, &test_set, &cfg.loss)?;
        write_metrics_csv(&rows, a.out.join("test_metrics.csv"))?;
        write_summary_json(&summary, a.out.join("test_summary.json"))?;
        println!("{}", to_json(&summary));
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let loss = match &a.config {
        Some(p) => TrainConfig::load(p)?.loss,
        None => LossConfig::default(),
    };
    let net = load_checkpoint(&a.checkpoint)?;
    let pairs = load_pairs(&a.dataset)?;
    let (summary, rows) = evaluate_detailed(&net, &pairs, &loss)?;
    if let Some(p) = &a.csv {
        write_metrics_csv(&rows, p)?;
    }
    if let Some(p) = &a.json {
        write_summary_json(&summary, p)?;
    }
    println!("{}", to_json(&summary));
    Ok(())
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn clean(a: CleanArgs) -> Result<()> {
    let net = load_checkpoint(&a.checkpoint)?;
    let out = pipeline::clean_png(&net, &read_input(&a.input)?)?;
    write_file(&a.output, &out)
}

fn retrieve(a: RetrieveArgs) -> Result<()> {
    let index = RetrievalIndex::load(&a.index)?;
    let net = a.checkpoint.as_ref().map(load_checkpoint).transpose()?;
    let hits = pipeline::retrieve(net.as_ref(), &index, &read_input(&a.input)?, a.k)?;
    println!("{}", to_json(&hits));
    Ok(())
}

fn index(a: IndexArgs) -> Result<()> {
    let pairs = load_pairs(&a.dataset)?;
    let index = RetrievalIndex::from_rasters(
        pairs
            .iter()
            .map(|p| (p.id.as_str(), p.category.as_deref().unwrap_or("unlabeled"), &p.clean)),
    )?;
    index.save(&a.index)?;
    log::info!("indexed {} items into {}", index.len(), a.index.display());
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let net = load_checkpoint(&a.checkpoint)?;
    let index = RetrievalIndex::load(&a.index)?;
    let pairs = load_pairs(&a.dataset)?;
    let rough: Vec<_> = pairs.iter().map(|p| p.rough.clone()).collect();
    let cleaned = rough
        .iter()
        .map(|r| clean_raster(&net, r))
        .collect::<sketchclean::Result<Vec<_>>>()?;
    let labels: Vec<String> = pairs
        .iter()
        .map(|p| p.category.clone().unwrap_or_else(|| "unlabeled".into()))
        .collect();
    let (defective, cleaned) = ab_compare(&rough, &cleaned, &labels, &index, a.k)?;
    println!("{}", to_json(&json!({ "defective": defective, "cleaned": cleaned })));
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let net = a.checkpoint.as_ref().map(load_checkpoint).transpose()?;
    let index = a.index.as_ref().map(RetrievalIndex::load).transpose()?;
    if net.is_none() {
        log::warn!("no checkpoint given; /clean and /retrieve will answer 503");
    }
    let state = ServiceState::new(net, index, a.dataset, Duration::from_millis(a.timeout_ms));
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(service::serve(state, &a.host, a.port))
        .map_err(|e| CliError::Runtime(format!("server error: {e}")))
}
