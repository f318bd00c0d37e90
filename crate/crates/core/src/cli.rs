//! `repsub` command line: `train`, `analyze` and `plot`.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error
//! (bad flags, unreachable dataset or missing input files).

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    cifar_paths, load_cifar10, load_cifar_file, synth_dataset, Dataset, Split, SynthSpec,
    CIFAR_TEST_FILE,
};
use crate::error::Error;
use crate::model::Arch;
use crate::report::{
    read_units_csv, write_correlations_csv, write_history_csv, write_plots, write_units_csv,
};
use crate::substitution::{analyze, correlate, UnitReport};
use crate::train::{evaluate, train, TrainConfig};
use crate::viz::{emit_image, VizConfig};

pub const DEFAULT_SEED: u64 = 42;
pub const CHECKPOINT_FILE: &str = "model.urs";
pub const HISTORY_FILE: &str = "history.csv";
pub const UNITS_FILE: &str = "units.csv";
pub const CORRELATIONS_FILE: &str = "correlations.csv";

#[derive(Debug, Parser)]
#[command(
    name = "repsub",
    version,
    about = "Train small networks, visualize units and measure representative substitution"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write a checkpoint plus per-epoch history.
    Train(TrainArgs),
    /// Compute selectivity, RS and ablation for every unit of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Render SVG scatter plots from an analysis table.
    Plot(PlotArgs),
}

/// Dataset selector: `synth` or `cifar10:<dir>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Cifar10(PathBuf),
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "synth" {
            return Ok(DataSource::Synth);
        }
        match s.strip_prefix("cifar10:") {
            Some(dir) if !dir.is_empty() => Ok(DataSource::Cifar10(PathBuf::from(dir))),
            _ => Err(format!("expected `synth` or `cifar10:<dir>`, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long, default_value = "synth")]
    pub data: DataSource,
    /// Seed of the synthetic data noise; defaults to --seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Synthetic classes.
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Synthetic training samples per class; analysis uses a fifth as many.
    #[arg(long, default_value_t = 250)]
    pub per_class: usize,
    /// Synthetic image side length.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "cnn-desk", value_parser = parse_arch)]
    pub arch: Arch,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f32,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f32,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Checkpoint path; defaults to `<out>/model.urs`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Seed of image generation (and of the data noise unless --data-seed).
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub viz_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub viz_step_size: f32,
    #[arg(long, default_value_t = 1)]
    pub viz_restarts: usize,
    /// Comma-separated analyzable layer indices (0-based); all by default.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Worker threads; 0 uses every logical CPU.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Checkpoint path; defaults to `<out>/model.urs`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Skip writing the PPM images.
    #[arg(long)]
    pub no_images: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PlotArgs {
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Analysis table; defaults to `<out>/units.csv`.
    #[arg(long)]
    pub units: Option<PathBuf>,
    /// Comma-separated layers to plot; all by default.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub layers: Option<Vec<usize>>,
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn require_exists(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

impl DataArgs {
    fn seed(&self, fallback: u64) -> u64 {
        self.data_seed.unwrap_or(fallback)
    }

    fn check_reachable(&self) -> CliResult<()> {
        if let DataSource::Cifar10(dir) = &self.data {
            require_exists(dir, "dataset directory")?;
            for p in cifar_paths(dir) {
                require_exists(&p, "dataset file")?;
            }
        }
        Ok(())
    }

    pub fn training_set(&self, fallback_seed: u64) -> CliResult<Dataset> {
        self.check_reachable()?;
        Ok(match &self.data {
            DataSource::Synth => synth_dataset(
                SynthSpec::new(
                    self.seed(fallback_seed),
                    self.classes,
                    self.per_class,
                    self.size,
                ),
                Split::Train,
            )?,
            DataSource::Cifar10(dir) => load_cifar10(dir)?.0,
        })
    }

    /// Held-out set used for selectivity and ablation. For synthetic data it
    /// is drawn with the next seed and a fifth of the training size.
    pub fn analysis_set(&self, fallback_seed: u64) -> CliResult<Dataset> {
        self.check_reachable()?;
        Ok(match &self.data {
            DataSource::Synth => synth_dataset(
                SynthSpec::new(
                    self.seed(fallback_seed).wrapping_add(1),
                    self.classes,
                    (self.per_class / 5).max(1),
                    self.size,
                ),
                Split::Test,
            )?,
            DataSource::Cifar10(dir) => load_cifar_file(&dir.join(CIFAR_TEST_FILE), Split::Test)?,
        })
    }
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let data = args.data.training_set(args.seed)?;
    let mut net = args
        .arch
        .build(data.sample_shape(), data.class_count(), args.seed)?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch: args.batch,
        lr: args.lr,
        momentum: args.momentum,
        seed: args.seed,
    };
    let history = train(&mut net, &data, &cfg)?;
    let ckpt = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| args.out.join(CHECKPOINT_FILE));
    save_checkpoint(&net, &ckpt)?;
    write_history_csv(&args.out.join(HISTORY_FILE), &history)?;
    eprintln!(
        "trained {} ({} parameters) for {} epochs: train accuracy {:.4}",
        args.arch,
        net.parameter_count(),
        args.epochs,
        history.final_train_accuracy
    );
    Ok(())
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<Vec<UnitReport>> {
    let ckpt = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| args.out.join(CHECKPOINT_FILE));
    require_exists(&ckpt, "checkpoint")?;
    let net = load_checkpoint(&ckpt)?;
    let data = args.data.analysis_set(args.seed)?;
    if data.sample_shape() != net.input_shape() {
        return Err(CliError::Usage(format!(
            "checkpoint expects inputs of shape {:?} but the dataset has {:?}",
            net.input_shape(),
            data.sample_shape()
        )));
    }
    if data.class_count() != net.class_count() {
        return Err(CliError::Usage(format!(
            "checkpoint has {} classes but the dataset has {}",
            net.class_count(),
            data.class_count()
        )));
    }
    if let Some(ls) = &args.layers {
        if ls.is_empty() {
            return Err(CliError::Usage("empty layer list".into()));
        }
        for &l in ls {
            if l >= net.analyzable_count() {
                return Err(CliError::Usage(format!(
                    "layer {l} out of range; the network has {} analyzable layers",
                    net.analyzable_count()
                )));
            }
        }
    }
    let mut layers = args.layers.clone();
    if let Some(ls) = &mut layers {
        ls.sort_unstable();
        ls.dedup();
    }
    let cfg = VizConfig {
        steps: args.viz_steps,
        step_size: args.viz_step_size,
        init_seed: args.seed,
        restarts: args.viz_restarts,
        ..VizConfig::default()
    };
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", args.jobs)))?;
    let (units, correlations) = pool.install(|| analyze(&net, &data, layers.as_deref(), &cfg))?;

    let reports: Vec<UnitReport> = units.iter().map(|a| a.report).collect();
    write_units_csv(&args.out.join(UNITS_FILE), &reports)?;
    write_correlations_csv(&args.out.join(CORRELATIONS_FILE), &correlations)?;
    if !args.no_images {
        for a in &units {
            let dir = args
                .out
                .join("viz")
                .join(format!("L{}", a.report.unit.layer));
            emit_image(&a.am, &dir.join(format!("U{}_am.ppm", a.report.unit.unit)))?;
            if let Some(iam) = &a.iam {
                emit_image(iam, &dir.join(format!("U{}_iam.ppm", a.report.unit.unit)))?;
            }
        }
    }
    eprintln!(
        "analyzed {} units over {} layers; held-out accuracy {:.4}",
        reports.len(),
        correlations.len(),
        evaluate(&net, &data)?
    );
    for c in &correlations {
        match c.rho {
            Some(r) => eprintln!("  layer {}: rho = {r:.4} ({} units)", c.layer, c.unit_count),
            None => eprintln!(
                "  layer {}: rho undefined ({} units)",
                c.layer, c.unit_count
            ),
        }
    }
    Ok(reports)
}

pub fn cmd_plot(args: &PlotArgs) -> CliResult<Vec<PathBuf>> {
    let table = args
        .units
        .clone()
        .unwrap_or_else(|| args.out.join(UNITS_FILE));
    require_exists(&table, "analysis table")?;
    let reports = read_units_csv(&table)?;
    let correlations = correlate(&reports);
    let written = write_plots(
        &args.out.join("plots"),
        &reports,
        &correlations,
        args.layers.as_deref(),
    )?;
    for p in &written {
        eprintln!("wrote {}", p.display());
    }
    Ok(written)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Analyze(a) => cmd_analyze(a).map(drop),
        Command::Plot(a) => cmd_plot(a).map(drop),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
