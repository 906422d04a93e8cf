//! Command-line front end: dataset generation, budget planning and
//! reproducible annotator/segmenter experiments.

pub mod config;
pub mod manifest;
mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{annotate_repeat, plan_rows, run_into, sweep_cells, Cell, RESULTS_FILE, cmd_evaluate, cmd_generate, cmd_plan, cmd_pseudo_label, cmd_run, cmd_sweep, cmd_train_annotator, cmd_train_segmenter};
pub use manifest::{RunManifest, RunStatus};

/// Failure classes, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or values (exit 1).
    Usage(String),
    /// Anything that fails after the inputs were accepted (exit 2).
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<budgetseg_core::Error> for CliError {
    fn from(e: budgetseg_core::Error) -> Self {
        use budgetseg_core::Error as E;
        match e {
            E::Config(_) | E::MissingWeakLabels(_) | E::InsufficientScenes { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "budgetseg", version, about = "Budget-aware semi-supervised segmentation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Config file plus per-key overrides shared by the experiment commands.
#[derive(Debug, Clone, Args, Default)]
pub struct ConfigArgs {
    /// JSON object of config keys (flat dotted keys or nested).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set annotator.epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    pub set: Vec<(String, String)>,
    #[arg(long)]
    pub variant: Option<String>,
    /// Strong (fully annotated) images.
    #[arg(long)]
    pub n: Option<usize>,
    /// Weak or unlabeled images.
    #[arg(long)]
    pub m: Option<usize>,
    /// Weak supervision kind: none, il, il+c, bb.
    #[arg(long)]
    pub weak: Option<String>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Epochs for both networks.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub init_seed: Option<u64>,
}

impl ConfigArgs {
    /// Explicit flags come after `--set` so they win.
    pub fn overrides(&self) -> Vec<(String, String)> {
        let mut out = self.set.clone();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("variant", self.variant.clone());
        push("n_strong", self.n.map(|v| v.to_string()));
        push("m_weak", self.m.map(|v| v.to_string()));
        push("weak_kind", self.weak.clone());
        push("repeats", self.repeats.map(|v| v.to_string()));
        push("annotator.epochs", self.epochs.map(|v| v.to_string()));
        push("segmenter.epochs", self.epochs.map(|v| v.to_string()));
        push("seeds.data", self.data_seed.map(|v| v.to_string()));
        push("seeds.split", self.split_seed.map(|v| v.to_string()));
        push("seeds.init", self.init_seed.map(|v| v.to_string()));
        out
    }

    pub fn load(&self) -> CliResult<budgetseg_core::pipeline::ExperimentConfig> {
        let cfg = config::load(self.config.as_deref(), &self.overrides())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (images, masks, labels, manifest).
    Generate(GenerateArgs),
    /// List (N, M) allocations that fit an annotation budget.
    Plan(PlanArgs),
    /// Train the annotation network on the strong split of one repeat.
    TrainAnnotator(StageArgs),
    /// Pseudo-label the weak split of one repeat with a trained annotator.
    PseudoLabel(PseudoLabelArgs),
    /// Train the segmentation network on strong plus pseudo-labelled images.
    TrainSegmenter(TrainSegmenterArgs),
    /// Run every repeat of an experiment and write results.csv.
    Run(RunArgs),
    /// Run a grid of experiments and merge their curves.
    Sweep(SweepArgs),
    /// Score a saved network on the held-out split.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Pool scenes to write; defaults to N + M.
    #[arg(long)]
    pub count: Option<usize>,
    /// Held-out scenes to write alongside the pool.
    #[arg(long, default_value_t = 0)]
    pub test_count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long, conflicts_with = "budget_seconds", required_unless_present = "budget_seconds")]
    pub budget_days: Option<f64>,
    #[arg(long)]
    pub budget_seconds: Option<f64>,
    #[arg(long, default_value = "full")]
    pub strong: String,
    #[arg(long, default_value = "il+c")]
    pub weak: String,
    /// Cap on the weak set; also fills zero-cost weak kinds.
    #[arg(long)]
    pub pool: Option<u64>,
    /// List every allocation whose truncated day count equals the budget
    /// instead of the largest affordable weak set per N.
    #[arg(long)]
    pub match_display: bool,
    #[arg(long)]
    pub classes_total: Option<f64>,
    #[arg(long)]
    pub classes_present: Option<f64>,
    #[arg(long)]
    pub objects: Option<f64>,
    #[arg(long)]
    pub verify_time: Option<f64>,
    #[arg(long)]
    pub count_extra_time: Option<f64>,
    #[arg(long)]
    pub mask_time: Option<f64>,
    #[arg(long)]
    pub box_time: Option<f64>,
    #[arg(long)]
    pub absent_classes: Option<f64>,
    /// Write the table here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Repeat index selecting the split and initialisation seeds.
    #[arg(long, default_value_t = 0)]
    pub repeat: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PseudoLabelArgs {
    #[command(flatten)]
    pub stage: StageArgs,
    /// Checkpoint stem written by `train-annotator`.
    #[arg(long)]
    pub annotator: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainSegmenterArgs {
    #[command(flatten)]
    pub stage: StageArgs,
    /// Dataset written by `pseudo-label`; omit to train on the strong set only.
    #[arg(long)]
    pub pseudo: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Read the scene pool from a `generate` directory instead of generating it.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Skip saving the networks of each repeat.
    #[arg(long)]
    pub no_checkpoints: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Strong-set sizes, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "budgets_days")]
    pub ns: Vec<usize>,
    /// Budgets in days; N comes from the config and M is the largest
    /// affordable weak set.
    #[arg(long, value_delimiter = ',')]
    pub budgets_days: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "plain")]
    pub variants: Vec<String>,
    /// Total images per cell; M = pool - N when set.
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Checkpoint stem of the network to score.
    #[arg(long)]
    pub model: PathBuf,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Plan(a) => cmd_plan(&a),
        Command::TrainAnnotator(a) => cmd_train_annotator(&a),
        Command::PseudoLabel(a) => cmd_pseudo_label(&a),
        Command::TrainSegmenter(a) => cmd_train_segmenter(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    }
}

/// Parses `args` and runs the command, returning the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
