use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod report;

/// Perturbation-based confidence estimation for language-model answers.
#[derive(Debug, Parser)]
#[command(name = "ccps", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic probe dump.
    Gen(GenArgs),
    /// Perturb every answer token and write its 75 features.
    Extract(ExtractArgs),
    /// Run only the contrastive pre-training stage.
    Pretrain(PretrainArgs),
    /// Pre-train and fine-tune a confidence model.
    Train(TrainArgs),
    /// Score answers with a trained model.
    Predict(PredictArgs),
    /// Compute calibration and discrimination metrics.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// JSON file with generator settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_records: Option<usize>,
    /// MC or OE.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub separability: Option<f64>,
    #[arg(long)]
    pub first_record: Option<u64>,
    #[arg(long)]
    pub d_h: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Probe dump directory.
    #[arg(long)]
    pub dump: PathBuf,
    /// Binary feature file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV mirror of the features.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = 20.0)]
    pub eps_max: f64,
    /// Number of perturbation steps.
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Args, Clone)]
pub struct TrainingFlags {
    /// JSON file with training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Learning rate [default: 1e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight decay [default: 0.1].
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Batch size [default: 32].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Contrastive pre-training steps [default: 5000].
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    /// Joint fine-tuning steps [default: 5000].
    #[arg(long)]
    pub finetune_steps: Option<usize>,
    /// Contrastive margin [default: 1.0].
    #[arg(long)]
    pub margin: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Expected answer format (MC or OE); defaults to the file's.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: TrainingFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Expected answer format (MC or OE); defaults to the files'.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Start fine-tuning from a model written by `pretrain`.
    #[arg(long)]
    pub init_model: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub ece_bins: usize,
    #[command(flatten)]
    pub flags: TrainingFlags,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// JSONL output, one line per answer.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction JSONL from `predict` (ccps scorer).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// `ccps` reads --predictions; `msp` scores a probe dump directly.
    #[arg(long, default_value = "ccps")]
    pub scorer: String,
    /// Probe dump for the msp scorer.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Directory receiving report.json, report.txt and reliability.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub ece_bins: usize,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();

    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => commands::gen(args),
        Command::Extract(args) => commands::extract(args),
        Command::Pretrain(args) => commands::pretrain(args),
        Command::Train(args) => commands::train(args),
        Command::Predict(args) => commands::predict(args),
        Command::Evaluate(args) => commands::evaluate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
