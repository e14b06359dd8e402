//! `omr`: generate synthetic clips, train, evaluate, run inference, and run
//! the ablation matrix.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;
use exit::CliError;

const EXIT_CODES: &str = "Exit codes: 0 ok, 1 internal failure, 2 bad input or flags, \
3 missing prerequisite (dataset or checkpoint), 4 incompatible artifacts, 5 I/O or corrupt file.\n\
Relative output paths are resolved under $OMR_OUTPUT_ROOT when it is set.";

#[derive(Parser, Debug)]
#[command(name = "omr", version, about = "Occlusion-aware lane detection on synthetic video", after_help = EXIT_CODES)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train step 1 (intra-frame) or step 2 (refinement).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split and write a metric report.
    Eval(EvalArgs),
    /// Run a checkpoint over one clip, writing lanes per frame and stage timings.
    Infer(InferArgs),
    /// Train and evaluate the ablation matrix over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_clips: Option<usize>,
    #[arg(long)]
    pub test_clips: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Replace an existing dataset directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Gates {
    Printed,
    Standard,
}

#[derive(Args, Debug, Default)]
pub struct OmrFlags {
    /// Drop the obstacle mask from the aggregation.
    #[arg(long)]
    pub no_obstacle_mask: bool,
    /// Drop the ConvLSTM memory.
    #[arg(long)]
    pub no_memory: bool,
    #[arg(long, value_enum)]
    pub gates: Option<Gates>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub step: u8,
    /// Step-1 checkpoint to start step 2 from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Checkpoint of an interrupted run of the same step.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total epochs for the chosen step.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Step 2 without synthetic occluders.
    #[arg(long)]
    pub no_augment: bool,
    #[command(flatten)]
    pub omr: OmrFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PipelineArg {
    Intra,
    Refined,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "refined")]
    pub pipeline: PipelineArg,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Label stored in the report.
    #[arg(long)]
    pub label: Option<String>,
    /// Write lane overlays and the intermediate maps as PPM images.
    #[arg(long)]
    pub render: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// A clip directory of a dataset, or a `frames.bin` tensor blob.
    #[arg(long)]
    pub clip: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Any of full, no-augmentation, no-obstacle-mask, no-memory.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[arg(long)]
    pub step1_epochs: Option<usize>,
    #[arg(long)]
    pub step2_epochs: Option<usize>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Generate(a) => commands::generate(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::Infer(a) => commands::infer(cfg, a),
        Command::Ablate(a) => commands::ablate(cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
