//! `hyperfast`: meta-train a hypernetwork, fit it to a CSV dataset, predict,
//! score predictions and check gradients.

mod commands;
mod config;
mod tabular;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "hyperfast", version, about = "Hypernetwork classifiers for tabular data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizationArg {
    None,
    Optimize,
    #[value(name = "ensemble_optimize", alias = "ensemble-optimize")]
    EnsembleOptimize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train hypernetwork parameters on a corpus directory.
    MetaTrain(MetaTrainArgs),
    /// Generate a classifier for a labeled CSV file.
    Fit(FitArgs),
    /// Write class probabilities for a CSV file.
    Predict(PredictArgs),
    /// Balanced accuracy of a predictions file against the true labels.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(clap::Args)]
pub struct MetaTrainArgs {
    /// Directory with one subdirectory per dataset (train.csv, test.csv, role).
    #[arg(long)]
    pub corpus: PathBuf,
    /// TOML training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Number of tasks to train on; overrides the config.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, env = "HF_SEED")]
    pub seed: Option<u64>,
    /// Write every log record to this file.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct FitArgs {
    /// Hypernetwork parameters or checkpoint file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    /// Label column; defaults to the last column.
    #[arg(long)]
    pub label: Option<String>,
    /// Columns to treat as categorical regardless of their contents.
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub n_ensemble: usize,
    #[arg(long, default_value_t = 2048)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value = "on")]
    pub nn_bias: Toggle,
    #[arg(long, value_enum, default_value = "none")]
    pub optimization: OptimizationArg,
    #[arg(long, default_value_t = 128)]
    pub optimize_steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub ft_learning_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    pub plateau_factor: f64,
    #[arg(long, default_value_t = 10)]
    pub plateau_patience: usize,
    /// Columns sampled per member; 0 keeps all.
    #[arg(long, default_value_t = 0)]
    pub feature_bag_width: usize,
    #[arg(long, env = "HF_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(clap::Args)]
pub struct PredictArgs {
    /// Fitted model file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV; standard output when omitted.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// CSV holding the true labels.
    #[arg(long)]
    pub truth: PathBuf,
    /// Label column of the truth file; defaults to its last column.
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(clap::Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: PrecisionArg,
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    #[arg(long, env = "HF_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Print the error of every parameter tensor.
    #[arg(long)]
    pub verbose: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MetaTrain(a) => commands::meta_train(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
