//! `fedsim` command line: run experiments, sweep participation skew,
//! compute marginals, execute the verification suite, and render plots.
//!
//! Exit codes: 0 success, 1 i/o failure, 2 invalid spec or input format,
//! 3 capacity exceeded, 4 verification failure.

mod commands;
mod failure;
mod manifest;
mod plot;
mod spec;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use failure::Failure;

#[derive(Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Deterministic federated-averaging simulator under stochastic client participation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunOverrides {
    /// Experiment spec (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the spec).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds, comma separated (overrides the spec).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Rules to run: agnostic, weighted (overrides the spec).
    #[arg(long, value_delimiter = ',')]
    rules: Option<Vec<String>>,
    /// Number of server aggregations T (overrides the spec).
    #[arg(long)]
    rounds: Option<usize>,
    /// Rounds per communication window H (overrides the spec).
    #[arg(long)]
    local_steps: Option<usize>,
    /// Fixed step size (overrides the spec's step-size policy).
    #[arg(long, conflicts_with = "schedule_c")]
    eta: Option<f64>,
    /// Square-root schedule constant c, eta = c / sqrt(T H).
    #[arg(long)]
    schedule_c: Option<f64>,
    /// Minibatch size (overrides the spec).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Monte-Carlo draws used when marginals cannot be enumerated.
    #[arg(long)]
    marginal_draws: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run federated averaging per (rule, seed) and write traces, a CSV
    /// summary and a manifest.
    Run(RunOverrides),
    /// Sweep the exponential participation bias and compare rules per seed.
    SweepSkew {
        #[command(flatten)]
        overrides: RunOverrides,
        /// Bias scales, comma separated; `inf` is uniform weights.
        #[arg(long, value_delimiter = ',', required = true)]
        betas: Vec<String>,
    },
    /// Print a sampler's marginal survival weights and skew as JSON.
    Marginals {
        /// Sampler descriptor: a JSON file path or an inline JSON object.
        #[arg(long)]
        sampler: String,
        /// exact: enumerate the subset distribution; estimate: Monte Carlo.
        #[arg(long, default_value = "exact")]
        mode: String,
        /// Draw count for estimate mode.
        #[arg(long, default_value_t = 100_000)]
        draws: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the numerical verification suite; exit 0 iff every report holds.
    Verify {
        /// quick or full (full adds the horizon-sweep rate fit).
        #[arg(long, default_value = "quick")]
        scale: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Debug negative control: divide the estimated gradient bound by
        /// this factor before checking; the suite must then fail.
        #[arg(long, hide = true)]
        tamper_shrink_g: Option<f64>,
    },
    /// Render a CSV produced by `run` or `sweep-skew` as a standalone SVG.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        /// loss-curves or skew-scatter.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(overrides) => commands::run::execute(&overrides),
        Command::SweepSkew { overrides, betas } => commands::sweep::execute(&overrides, &betas),
        Command::Marginals {
            sampler,
            mode,
            draws,
            seed,
        } => commands::marginals::execute(&sampler, &mode, draws, seed),
        Command::Verify {
            scale,
            seed,
            out,
            tamper_shrink_g,
        } => commands::verify::execute(&scale, seed, out.as_deref(), tamper_shrink_g),
        Command::Plot { csv, kind, out } => commands::plot_cmd::execute(&csv, &kind, &out),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(Failure { code, message }) => {
            eprintln!("error: {message}");
            std::process::exit(code);
        }
    }
}
