//! Command-line entry point.
//!
//! Exit codes: 0 ok, 2 config, 3 I/O, 4 data, 5 numeric failure. Output
//! paths must not exist unless `--force` is given; a failed command removes
//! whatever it wrote.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, RunConfigFile};
use crate::data::{generate_split, read_dataset, write_dataset, DataError, Split};
use crate::geometry::GeometryError;
use crate::hand_model::{compute_mean_scale, HandModelError, RescaleTarget, ScaleStats, SkeletonTopology};
use crate::matching::MatchingError;
use crate::model::{ModelConfig, ModelError};
use crate::nn::{read_checkpoint, NnError, ParamStore};
use crate::train_eval::{ablate, predict, score, train, AblationConfig, EvalOptions, FramePrediction, TrainError};

pub const THREADS_ENV: &str = "SETPOSE_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "setpose", version, about = "Two-hand 3D pose set prediction on synthetic scenes")]
pub struct Cli {
    /// Worker threads; 0 uses every core, 1 runs fully sequentially
    #[arg(long, global = true, env = THREADS_ENV, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one split of the synthetic dataset
    GenData(GenDataArgs),
    /// Per-side mean hand scale of a dataset
    ScaleStats(ScaleStatsArgs),
    /// Train a model
    Train(TrainArgs),
    /// Per-side MPJPE of a checkpoint or of dumped predictions
    Eval(EvalArgs),
    /// Dump per-frame predictions as JSON lines
    Predict(PredictArgs),
    /// Run the depth-parametrization and rescaling ablation grid
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Run configuration JSON; only the "data" section is used [default: built-in defaults]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
    /// Split to generate: train, val, test or test-shifted
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// Overrides data.n_samples [config default: 512]
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// Overrides data.seed [config default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing output
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ScaleStatsArgs {
    /// Dataset directory with 3D ground truth
    #[arg(long)]
    pub data: PathBuf,
    /// Output JSON file
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing output
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration JSON; the "model" and "train" sections are used [default: built-in defaults]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset directory, used to pick the best checkpoint [default: none]
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Output run directory
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides train.total_epochs [config default: 30]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides train.seed [config default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing output
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Predictions JSON-lines file written by `predict`
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Dataset directory with 3D ground truth
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration JSON; only the "eval" section is used [default: built-in defaults]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Rescale predictions toward the training mean hand scale [config default: false]
    #[arg(long)]
    pub rescale: bool,
    /// Scale statistics JSON written by `scale-stats` [config default: none]
    #[arg(long)]
    pub scale_stats: Option<PathBuf>,
    /// Rescaling target: per-side or pooled [config default: per-side]
    #[arg(long)]
    pub target: Option<TargetArg>,
    /// Report JSON file [default: none, text table only]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing output
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum TargetArg {
    PerSide,
    Pooled,
}

impl From<TargetArg> for RescaleTarget {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::PerSide => RescaleTarget::PerSide,
            TargetArg::Pooled => RescaleTarget::Pooled,
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint directory
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Output JSON-lines file
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing output
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Ablation configuration JSON with optional "model", "train", "data",
    /// "eval_samples" and "variants" keys [default: built-in defaults]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output table JSON file
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing output
    #[arg(long)]
    pub force: bool,
}

/// A failed command: exit code and message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn nn_code(e: &NnError) -> i32 {
    match e {
        NnError::Io { .. } => EXIT_IO,
        NnError::NonFiniteLoss(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn hand_model_code(e: &HandModelError) -> i32 {
    match e {
        HandModelError::EmptySide(_) | HandModelError::NonPositiveScale(_) => EXIT_DATA,
        HandModelError::InvalidTopology(_) => EXIT_CONFIG,
        HandModelError::DegeneratePose(_) | HandModelError::Geometry(_) => EXIT_NUMERIC,
    }
}

fn data_code(e: &DataError) -> i32 {
    match e {
        DataError::Config(_) => EXIT_CONFIG,
        DataError::Io { .. } => EXIT_IO,
        DataError::Format { .. } | DataError::Geometry(_) | DataError::HandModel(_) => EXIT_DATA,
    }
}

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::Config(_) => EXIT_CONFIG,
        ModelError::Shape(_) => EXIT_DATA,
        ModelError::Nn(n) => nn_code(n),
        ModelError::Geometry(_) => EXIT_NUMERIC,
    }
}

fn train_code(e: &TrainError) -> i32 {
    match e {
        TrainError::Config(_) | TrainError::MissingScaleStats => EXIT_CONFIG,
        TrainError::NonFiniteLoss { .. } | TrainError::Geometry(_) => EXIT_NUMERIC,
        TrainError::Data(_) => EXIT_DATA,
        TrainError::Io { .. } => EXIT_IO,
        TrainError::Model(m) => model_code(m),
        TrainError::Matching(MatchingError::Nn(n)) | TrainError::Nn(n) => nn_code(n),
        TrainError::Matching(_) => EXIT_NUMERIC,
        TrainError::HandModel(h) => hand_model_code(h),
        TrainError::Dataset(d) => data_code(d),
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::Io { .. } => EXIT_IO,
            ConfigError::Invalid { .. } => EXIT_CONFIG,
        };
        Self::new(code, e.to_string())
    }
}

macro_rules! cli_error_from {
    ($ty:ty, $code:expr) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                Self::new($code(&e), e.to_string())
            }
        }
    };
}

cli_error_from!(DataError, data_code);
cli_error_from!(TrainError, train_code);
cli_error_from!(ModelError, model_code);
cli_error_from!(NnError, nn_code);
cli_error_from!(HandModelError, hand_model_code);
cli_error_from!(GeometryError, |_: &GeometryError| EXIT_NUMERIC);

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(EXIT_IO, format!("{}: {e}", path.display()))
}

fn remove_path(path: &Path) -> std::io::Result<()> {
    if path.is_dir() {
        fs::remove_dir_all(path)
    } else {
        fs::remove_file(path)
    }
}

/// Refuses an existing `path` unless `force`, in which case it is removed.
fn claim_output(path: &Path, force: bool) -> Result<(), CliError> {
    if !path.exists() {
        return Ok(());
    }
    if !force {
        return Err(CliError::new(EXIT_IO, format!("{}: output exists (pass --force to replace it)", path.display())));
    }
    remove_path(path).map_err(|e| io_error(path, e))
}

/// Runs `body` with `out` claimed; removes `out` if `body` fails.
fn with_output<T>(out: &Path, force: bool, body: impl FnOnce() -> Result<T, CliError>) -> Result<T, CliError> {
    claim_output(out, force)?;
    let result = body();
    if result.is_err() && out.exists() {
        let _ = remove_path(out);
    }
    result
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::new(EXIT_DATA, format!("{}: {e}", path.display())))
}

/// Parameters and model config of a checkpoint directory.
pub fn load_model(dir: &Path) -> Result<(ParamStore<f64>, ModelConfig), CliError> {
    let (params, manifest) = read_checkpoint::<f64>(dir)?;
    let value = manifest
        .model_config
        .ok_or_else(|| CliError::new(EXIT_DATA, format!("{}: checkpoint has no model config", dir.display())))?;
    let cfg: ModelConfig = serde_json::from_value(value)
        .map_err(|e| CliError::new(EXIT_DATA, format!("{}: bad model config: {e}", dir.display())))?;
    cfg.validate()?;
    Ok((params, cfg))
}

/// Reads a predictions JSON-lines file.
pub fn read_predictions(path: &Path) -> Result<Vec<FramePrediction>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::new(EXIT_DATA, format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn predictions_jsonl(preds: &[FramePrediction]) -> String {
    let mut s = String::new();
    for p in preds {
        s += &serde_json::to_string(p).expect("prediction serializes");
        s.push('\n');
    }
    s
}

fn gen_data(a: &GenDataArgs) -> Result<String, CliError> {
    let mut data = RunConfigFile::load_or_default(a.config.as_deref())?.data;
    if let Some(n) = a.n_samples {
        data.n_samples = n;
    }
    if let Some(seed) = a.seed {
        data.seed = seed;
    }
    data.validate()?;
    with_output(&a.out, a.force, || {
        let ds = generate_split(&data, a.split, &SkeletonTopology::standard())?;
        write_dataset(&a.out, &ds)?;
        let c = &ds.meta.counts;
        Ok(format!(
            "wrote {} split to {}: {} frames, {} left, {} right\n",
            a.split.name(),
            a.out.display(),
            c.samples,
            c.left,
            c.right
        ))
    })
}

fn scale_stats(a: &ScaleStatsArgs) -> Result<String, CliError> {
    let ds = read_dataset(&a.data)?;
    let stats = compute_mean_scale(ds.hands_3d(), &SkeletonTopology::standard())?;
    let json = to_json(&stats);
    with_output(&a.out, a.force, || write_file(&a.out, &json))?;
    Ok(json)
}

fn train_cmd(a: &TrainArgs, sequential: bool) -> Result<String, CliError> {
    let file = RunConfigFile::load_or_default(a.config.as_deref())?;
    let mut cfg = file.train.clone();
    if let Some(e) = a.epochs {
        cfg.total_epochs = e;
        cfg.lr_drop_epoch = cfg.lr_drop_epoch.min(e.saturating_sub(1));
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.deterministic |= sequential;
    cfg.validate()?;
    let train_set = read_dataset(&a.data)?;
    let val_set = a.val.as_deref().map(read_dataset).transpose()?;
    with_output(&a.out, a.force, || {
        let out = train(&file.model, &cfg, &train_set, val_set.as_ref(), Some(&a.out))?;
        let record = RunConfigFile { train: cfg.clone(), ..file.clone() };
        write_file(&a.out.join("config.json"), &to_json(&record))?;
        let last = out.log.steps().last().map_or(f64::NAN, |s| s.loss);
        let mut msg = format!("trained {} steps, final loss {last:.6}\n", out.steps);
        if let Some((epoch, _)) = &out.best {
            msg += &format!("best validation epoch {epoch}\n");
        }
        Ok(msg)
    })
}

fn eval_options(a: &EvalArgs, sequential: bool) -> Result<EvalOptions, CliError> {
    let section = RunConfigFile::load_or_default(a.config.as_deref())?.eval;
    let stats_path = a.scale_stats.clone().or(section.scale_stats);
    let scale_stats: Option<ScaleStats<f64>> = stats_path.as_deref().map(read_json).transpose()?;
    Ok(EvalOptions {
        rescale: a.rescale || section.rescale,
        scale_stats,
        target: a.target.map_or(section.target, Into::into),
        sequential,
    })
}

fn eval_cmd(a: &EvalArgs, sequential: bool) -> Result<String, CliError> {
    let opts = eval_options(a, sequential)?;
    if opts.rescale && opts.scale_stats.is_none() {
        return Err(TrainError::MissingScaleStats.into());
    }
    let ds = read_dataset(&a.data)?;
    let preds = match (&a.checkpoint, &a.predictions) {
        (Some(dir), _) => {
            let (params, cfg) = load_model(dir)?;
            predict(&params, &cfg, &ds, sequential)?
        }
        (None, Some(path)) => read_predictions(path)?,
        (None, None) => return Err(CliError::new(EXIT_CONFIG, "either --checkpoint or --predictions is required")),
    };
    let report = score(&ds, &preds, &opts, &SkeletonTopology::standard())?;
    if let Some(out) = &a.out {
        with_output(out, a.force, || write_file(out, &to_json(&report)))?;
    }
    Ok(report.to_text())
}

fn predict_cmd(a: &PredictArgs, sequential: bool) -> Result<String, CliError> {
    let (params, cfg) = load_model(&a.checkpoint)?;
    let ds = read_dataset(&a.data)?;
    let preds = predict(&params, &cfg, &ds, sequential)?;
    with_output(&a.out, a.force, || write_file(&a.out, &predictions_jsonl(&preds)))?;
    Ok(format!("wrote {} frame predictions to {}\n", preds.len(), a.out.display()))
}

fn ablate_cmd(a: &AblateArgs, sequential: bool) -> Result<String, CliError> {
    let mut cfg: AblationConfig = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::new(EXIT_CONFIG, format!("{}: {e}", p.display())))?
        }
        None => AblationConfig::default(),
    };
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.data.validate()?;
    cfg.train.deterministic |= sequential;
    claim_output(&a.out, a.force)?;
    let table = ablate(&cfg, &SkeletonTopology::standard())?;
    with_output(&a.out, true, || write_file(&a.out, &to_json(&table)))?;
    Ok(table.to_text())
}

/// Runs a parsed command line; returns the text for standard output.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let sequential = cli.threads == 1;
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::ScaleStats(a) => scale_stats(a),
        Command::Train(a) => train_cmd(a, sequential),
        Command::Eval(a) => eval_cmd(a, sequential),
        Command::Predict(a) => predict_cmd(a, sequential),
        Command::Ablate(a) => ablate_cmd(a, sequential),
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    }
    match run(&cli) {
        Ok(text) => {
            let mut out = std::io::stdout().lock();
            let _ = out.write_all(text.as_bytes());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
