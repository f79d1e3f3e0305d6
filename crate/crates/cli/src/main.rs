//! `textmanip`: dataset creation, training, evaluation and single-image
//! manipulation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "textmanip", version, about = "Text-guided image manipulation on a captioned-shapes corpus")]
struct Cli {
    /// Directory every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    root: PathBuf,
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the captioned-shapes corpus.
    MakeDataset {
        /// Training samples (default: `train_size`).
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Pretrain the matching encoders and the score classifier.
    PretrainEncoders {
        /// Overrides `epochs_pretrain`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the main generator.
    Train(TrainArgs),
    /// Train the correction network with the main generator frozen.
    TrainDcm(TrainArgs),
    /// Score a model on mismatched captions.
    Eval(EvalArgs),
    /// Edit one image to match a caption.
    Manipulate(ManipulateArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// none, no-acm, concat, no-main or no-dcm.
    #[arg(long, default_value = "none")]
    ablation: String,
    /// Overrides the phase's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Starting checkpoint; defaults to the pretrained encoders (train) or
    /// the main checkpoint of the ablation (train-dcm).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, default_value = "none")]
    ablation: String,
    /// `checkpoint` or `identity`.
    #[arg(long, default_value = "checkpoint")]
    model: String,
    /// Defaults to the correction checkpoint of the ablation when present,
    /// else its main checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// train, val or test.
    #[arg(long, default_value = "val")]
    split: String,
    /// `any` or `color`.
    #[arg(long, default_value = "any")]
    kind: String,
    /// Record file; defaults to the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ManipulateArgs {
    /// Source PNG.
    #[arg(long)]
    image: PathBuf,
    /// Target caption, using corpus vocabulary.
    #[arg(long)]
    text: String,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Edited image (default: `manipulated.png` in the output directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Strip of the source and every generated image (default:
    /// `manipulated-grid.png` in the output directory).
    #[arg(long)]
    grid: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
