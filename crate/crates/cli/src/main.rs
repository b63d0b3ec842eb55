use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use ippo_cli::{command_ablate, command_eval, command_figure, command_train, parse_config, Overrides, RunConfig};

/// IPPO experiments on small cooperative Dec-POMDPs. Log verbosity follows RUST_LOG.
#[derive(Parser)]
#[command(name = "ippo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train `run.variant` on every seed and save checkpoints.
    Train(RunArgs),
    /// Train every variant in `run.variants` on every seed.
    Ablate(RunArgs),
    /// Greedy evaluation of the checkpoints in the output directory.
    Eval(RunArgs),
    /// Re-render plots from the metric CSVs below a directory.
    Figure(FigureArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `run.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `run.seeds`, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct FigureArgs {
    /// Directory holding metric CSVs; defaults to the config's `run.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn load(args: &RunArgs) -> Result<RunConfig> {
    let overrides = Overrides { out: args.out.clone(), seeds: args.seeds.clone() };
    overrides.apply(parse_config(&args.config)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => command_train(&load(&a)?, a.force),
        Command::Ablate(a) => command_ablate(&load(&a)?, a.force),
        Command::Eval(a) => command_eval(&load(&a)?).map(drop),
        Command::Figure(a) => {
            let dir = match (a.out, a.config) {
                (Some(out), _) => out,
                (None, Some(config)) => parse_config(&config)?.run.out_dir,
                (None, None) => anyhow::bail!("figure needs --out or --config"),
            };
            command_figure(&dir).map(drop)
        }
    }
}
