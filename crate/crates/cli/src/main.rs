mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "chexopt", version, about = "Five-class chest X-ray training experiments on the CPU")]
struct Cli {
    /// JSON config document; its values override the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Starting point for configuration values: `full` or `desk`.
    #[arg(long, global = true, default_value = "full")]
    pub preset: String,
    /// Log only warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic images and write them with a manifest.
    GenerateData(GenerateArgs),
    /// Undersample and augment classes to a common size.
    Balance(BalanceArgs),
    /// Assign train/val/test splits per class.
    Split(SplitArgs),
    /// Train one run per seed.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a manifest.
    Evaluate(EvaluateArgs),
    /// Paired comparison of two arms of completed runs.
    Compare(CompareArgs),
    /// Markdown summary of a completed run.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Images per class.
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Per-class counts, comma separated, in Cardiomegaly, COVID-19, Normal, Pneumonia, Tuberculosis order.
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    /// Generate only these classes (others get no images).
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct BalanceArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Images per class after balancing.
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output manifest; must sit in the same directory as the input so image paths resolve.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Arm {
    /// Full optimization stack.
    Proposed,
    /// Adam with coupled decay, constant rate, no EMA, no loss scaling.
    Baseline,
}

impl Arm {
    pub fn dir_name(self) -> &'static str {
        match self {
            Arm::Proposed => "proposed",
            Arm::Baseline => "baseline",
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Split manifest; image paths are resolved relative to its directory.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Seed list: `0..8` (inclusive), `3` or `0,2,5`.
    #[arg(long, value_parser = config::parse_seed_list)]
    pub seeds: Option<config::SeedList>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub profile: Option<String>,
    /// Runs trained at the same time.
    #[arg(long)]
    pub parallel: Option<usize>,
    #[arg(long, value_enum, default_value = "proposed")]
    pub arm: Arm,
    /// Continue interrupted runs from their saved state.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this epoch, keeping state for `--resume`.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Baseline run directories, or directories holding `*/summary.json`.
    #[arg(long, num_args = 1.., required = true)]
    pub baseline: Vec<PathBuf>,
    /// Proposed run directories, or directories holding `*/summary.json`.
    #[arg(long, num_args = 1.., required = true)]
    pub proposed: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub bootstrap_iterations: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("CHEXOPT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| CliError::Config(format!("CHEXOPT_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let cfg = config::CliConfig::load(&cli.preset, cli.config.as_deref())?;
    match cli.command {
        Command::GenerateData(a) => commands::generate(&cfg, a),
        Command::Balance(a) => commands::balance(&cfg, a),
        Command::Split(a) => commands::split(&cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Evaluate(a) => commands::evaluate(&cfg, a),
        Command::Compare(a) => commands::compare(&cfg, a),
        Command::Report(a) => commands::report(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
