//! `pmf`: data generation, training, evaluation, prediction and attention
//! overlays for the relation network.
//!
//! Exit codes: 0 success, 2 input error (bad arguments, files, configs or
//! mismatched checkpoints), 3 runtime failure (divergence, write errors).

mod commands;
mod visualize;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "pmf",
    version,
    about = "Pose-aware relation network for human-object interaction detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus per-step metrics.
    Train(TrainArgs),
    /// Score every proposal, write detections and an evaluation report.
    Evaluate(EvaluateArgs),
    /// Write per-proposal scores and attention as JSON lines.
    Predict(PredictArgs),
    /// Render attention overlays and spatial maps for one image.
    Visualize(VisualizeArgs),
    /// Print or write the annotated default training configuration.
    InitConfig(InitConfigArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Synthetic spec (TOML). Omitted keys take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec seed and PMF_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training configuration (TOML). Omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics CSV; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Also write the checkpoint every N iterations (0 disables).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Ablation switch, e.g. `--flag PC=false`. Repeatable.
    #[arg(long = "flag", value_name = "NAME=BOOL")]
    pub flags: Vec<String>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation report (JSON).
    #[arg(long)]
    pub report: PathBuf,
    /// Ranked detections (JSON lines).
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Per-proposal scores and attention (JSON lines).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// IoU threshold applied to both boxes.
    #[arg(long, default_value_t = 0.5)]
    pub thr: f64,
    /// Require object classes to agree for a match.
    #[arg(long)]
    pub check_object_class: bool,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict to one image.
    #[arg(long)]
    pub image: Option<u64>,
}

#[derive(Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub image: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Pixel magnification of the overlays.
    #[arg(long, default_value_t = 4)]
    pub scale: u32,
}

#[derive(Args)]
pub struct InitConfigArgs {
    /// Destination; prints to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Error carrying its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn input(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: 2,
            error: error.into(),
        }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: 3,
            error: error.into(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Predict(a) => commands::predict(a),
        Command::Visualize(a) => visualize::run(a),
        Command::InitConfig(a) => commands::init_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
