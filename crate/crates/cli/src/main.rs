//! `flint`: batch front end for synthesis, training, interpolation and
//! projection analysis.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure. Every
//! error is printed as one `error: ...` line on stderr.

mod commands;
mod config;
mod pgm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(flint_core::Error),
}

impl From<flint_core::Error> for CliError {
    fn from(e: flint_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(flint_core::Error::Numeric(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "flint", version, about = "Flow-based temporal interpolation of scalar-field ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic blob ensemble with analytic flow.
    Synth(SynthArgs),
    /// Train FLINT or HyperFLINT; writes model.ckpt and history.csv.
    Train(TrainArgs),
    /// Interpolate every member from keyframes at a given rate.
    Infer(InferArgs),
    /// Score saved predictions against ground truth.
    Eval(EvalArgs),
    /// Embed a dataset in 2D and score the projection.
    Project(ProjectArgs),
    /// Select Pareto-efficient models by neighborhood hit and silhouette.
    Pareto(ParetoArgs),
    /// Replicate projection metrics over labeled subsets.
    Stability(StabilityArgs),
    /// Sweep simulation parameters through a HyperFLINT checkpoint.
    Explore(ExploreArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Manifest file or the directory holding it.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Keep every R-th timestep as a keyframe.
    #[arg(long, default_value_t = 4)]
    pub rate: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one PGM image per predicted frame.
    #[arg(long)]
    pub pgm: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Ground-truth ensemble.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory of `infer`.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// pca, ae, sparse or vae.
    #[arg(long, default_value = "pca")]
    pub backend: String,
    /// Encoder config (latent_dim, depth, epochs, lr, ...).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ParetoArgs {
    /// CSV of `id,hit,silhouette` rows or `project` metrics files.
    #[arg(long, num_args = 1.., required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StabilityArgs {
    /// Embedding CSV (`x,y,label`).
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    pub embedding: Option<PathBuf>,
    /// Dataset to embed with PCA.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.025,0.05,0.1")]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExploreArgs {
    /// HyperFLINT checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Member providing D_s and D_u.
    #[arg(long, default_value_t = 0)]
    pub member: usize,
    /// Index of D_s.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Index of D_u.
    #[arg(long, default_value_t = 4)]
    pub end: usize,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Parameter points separated by `;` with components separated by `,`;
    /// for one-parameter models `,` also separates points.
    #[arg(long)]
    pub params: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pgm: bool,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Project(a) => commands::project(a),
        Command::Pareto(a) => commands::pareto(a),
        Command::Stability(a) => commands::stability(a),
        Command::Explore(a) => commands::explore(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let msg = e.to_string();
                let mut lines = msg.lines();
                let first = lines.next().unwrap_or("invalid arguments").trim_start_matches("error: ");
                eprintln!("error: usage: {first}");
                for l in lines {
                    eprintln!("{l}");
                }
                return ExitCode::from(1);
            }
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
