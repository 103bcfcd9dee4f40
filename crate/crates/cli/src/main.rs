//! `grin`: train, stylize, verify gradients and inspect the smoothing graph.

mod commands;
mod config;
mod image_io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grin::{Activation, AdjacencyVariant, Mode, Reduction, ThetaForm};

#[derive(Parser, Debug)]
#[command(name = "grin", version, about = "Graph instance normalization style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a decoder on synthetic content/style pairs.
    Train(TrainArgs),
    /// Stylize a content image with a style image.
    Stylize(StylizeArgs),
    /// Compare tape gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Print and export the style similarity graph of a batch.
    InspectGraph(InspectArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key = value` settings file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Square training image side.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub adjacency: Option<AdjacencyVariant>,
    #[arg(long)]
    pub activation: Option<Activation>,
    #[arg(long)]
    pub theta: Option<ThetaForm>,
    /// Number of graph layers.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub eps_degree: Option<f64>,
    #[arg(long)]
    pub reduction: Option<Reduction>,
    /// Treat the normalized target as a constant in the content loss.
    #[arg(long)]
    pub detach_target: bool,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Loss trace path; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct StylizeArgs {
    pub content: PathBuf,
    pub style: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Finite-difference step.
    #[arg(long)]
    pub step: Option<f64>,
    /// Coordinates probed per model parameter tensor; 0 probes all.
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct InspectArgs {
    /// Style images; a synthetic two-cluster batch is used when none are given.
    pub styles: Vec<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Synthetic batch size.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Synthetic image side.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long)]
    pub adjacency: Option<AdjacencyVariant>,
    #[arg(long)]
    pub eps_degree: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRIN_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => commands::cmd_train(a),
        Command::Stylize(a) => commands::cmd_stylize(a),
        Command::Gradcheck(a) => commands::cmd_gradcheck(a),
        Command::InspectGraph(a) => commands::cmd_inspect_graph(a),
    };
    match result {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
