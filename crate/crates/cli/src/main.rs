// SPDX-License-Identifier: MIT OR Apache-2.0

//! `latsteer` command-line pipeline.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use latsteer::StrengthGrid;

#[derive(Debug, Parser)]
#[command(
    name = "latsteer",
    version,
    about = "Find, inspect and steer language directions in hidden states"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Fit per-layer PCA directions on a dump.
    FitDirections(FitArgs),
    /// Write language-map scatter and variance CSVs.
    PlotData(PlotArgs),
    /// Per-pair PC1 logistic probes with a fit/validation split.
    Classify(ClassifyArgs),
    /// Top-k KL between reference, unsteered and steered distributions.
    EvaluateKl(EvalKlArgs),
    /// Pick the steering strength that minimizes mean KL over a family dir.
    GridSearch(GridArgs),
    /// Generate a synthetic dump, or a synthetic distribution family.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of principal components per layer.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct PlotArgs {
    #[arg(long)]
    pub directions: PathBuf,
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Layers to emit scatter CSVs for (repeatable). Defaults to all.
    #[arg(long = "layer")]
    pub layers: Vec<usize>,
    /// Also emit scatter CSVs of activations steered with this strength.
    #[arg(long, allow_hyphen_values = true)]
    pub strength: Option<f64>,
    /// Lowest steered layer. Defaults to the last quarter of layers.
    #[arg(long)]
    pub layer_threshold: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub dump: PathBuf,
    /// Use PC1 from these directions instead of fitting per pair.
    #[arg(long)]
    pub directions: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Layer to classify. Defaults to the final layer.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Language every pair is formed with.
    #[arg(long, default_value = "en")]
    pub reference: String,
    /// Samples per language used to fit PCA and the probe.
    #[arg(long, default_value_t = 50)]
    pub fit: usize,
    /// Samples per language held out for validation.
    #[arg(long, default_value_t = 100)]
    pub val: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalKlArgs {
    /// JSONL files whose records carry their role in `context_tag` (repeatable).
    #[arg(long = "dists", conflicts_with_all = ["reference", "candidate", "steered"])]
    pub dists: Vec<PathBuf>,
    /// Reference distributions; tags are ignored.
    #[arg(long, requires = "candidate")]
    pub reference: Option<PathBuf>,
    /// Unsteered candidate distributions; tags are ignored.
    #[arg(long, requires = "reference")]
    pub candidate: Option<PathBuf>,
    /// Steered distributions; tags are ignored.
    #[arg(long, requires = "reference")]
    pub steered: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = latsteer::divergence::DEFAULT_TOP_K)]
    pub top_k: usize,
    /// Language pair label such as `en-zh`.
    #[arg(long, default_value = "")]
    pub pair: String,
    /// Strength the steered distributions were produced with, for the report.
    #[arg(long, allow_hyphen_values = true)]
    pub strength: Option<f64>,
    /// Rows of the token shift table written for the first sample.
    #[arg(long, default_value_t = 20)]
    pub shift_rows: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct GridArgs {
    /// Directory of `strength_<s>.jsonl` files.
    #[arg(long)]
    pub family: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "-4:4:0.1", allow_hyphen_values = true)]
    pub grid: StrengthGrid,
    #[arg(long, default_value_t = latsteer::divergence::DEFAULT_TOP_K)]
    pub top_k: usize,
    /// Language pair label. Defaults to the one recorded in `family.json`.
    #[arg(long)]
    pub pair: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Samples per language.
    #[arg(long, default_value_t = 150)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 6)]
    pub crit_layer: usize,
    /// Write a next-token distribution family instead of a dump.
    #[arg(long, requires = "s_star")]
    pub family: bool,
    /// Planted optimal strength of the family.
    #[arg(long, allow_hyphen_values = true)]
    pub s_star: Option<f64>,
    #[arg(long, default_value = "-4:4:0.1", allow_hyphen_values = true)]
    pub grid: StrengthGrid,
    #[arg(long, default_value_t = latsteer::divergence::DEFAULT_TOP_K)]
    pub top_k: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    /// Samples in the family.
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LATSTEER_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::FitDirections(a) => commands::fit_directions(a),
        Command::PlotData(a) => commands::plot_data(a),
        Command::Classify(a) => commands::classify(a),
        Command::EvaluateKl(a) => commands::evaluate_kl(a),
        Command::GridSearch(a) => commands::grid_search(a),
        Command::Synth(a) => commands::synth(a),
    }
    .and_then(|run| output::write_run_meta(&cli.command, run));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(output::exit_code(&err))
        }
    }
}
