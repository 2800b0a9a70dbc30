//! `tabdl`: train, sweep, explain and tune tabular models from the shell.
//!
//! Exit codes: 0 success, 2 configuration or user error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tabdl::Error;

mod commands;
mod config;
mod output;

use config::Overrides;

#[derive(Parser)]
#[command(name = "tabdl", version, about = "Deep learning baselines for tabular data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model over one or more seeds.
    Train(Flags),
    /// Run the synthetic alpha sweep.
    Synth(Flags),
    /// Feature importances (am, ig, pt) and their rank correlations.
    Explain(Flags),
    /// Random hyperparameter search on the validation split.
    Tune(Flags),
}

#[derive(Args)]
struct Flags {
    /// JSON run config (nested or dotted keys); a run manifest also works.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model family: mlp, resnet or ft_transformer.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    preset: Option<String>,
    /// Number of seeds (0..n).
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "TABDL_THREADS")]
    threads: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_numerical() => 3,
        Error::Shape(_) | Error::Contract(_) => 1,
        _ => 2,
    }
}

fn run(command: &str, flags: Flags) -> tabdl::Result<PathBuf> {
    let mut cfg = config::load(flags.config.as_deref())?;
    cfg.apply(&Overrides {
        model: flags.model,
        preset: flags.preset,
        seeds: flags.seeds,
        alphas: flags.alphas,
        budget: flags.budget,
        out: flags.out,
        threads: flags.threads,
    })?;
    cfg.validate()?;
    tabdl::par::init_thread_pool(cfg.threads);
    match command {
        "train" => commands::train(&cfg),
        "synth" => commands::synth(&cfg),
        "explain" => commands::explain(&cfg),
        _ => commands::tune(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, flags) = match cli.command {
        Command::Train(f) => ("train", f),
        Command::Synth(f) => ("synth", f),
        Command::Explain(f) => ("explain", f),
        Command::Tune(f) => ("tune", f),
    };
    match run(name, flags) {
        Ok(manifest) => {
            println!("{}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
