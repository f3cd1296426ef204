use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod report;

use commands::CliError;

/// Regularized contrastive learning and time-series attribution maps.
#[derive(Parser, Debug)]
#[command(name = "xcebra", version)]
struct Cli {
    /// JSON run configuration; every key is optional.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads.
    #[arg(long, env = "XCEBRA_JOBS", global = true)]
    jobs: Option<usize>,
    /// Shorthand for `--set output=DIR`.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write a synthetic dataset with a known attribution map.
    Generate,
    /// Write simulated navigation datasets (optionally a noise sweep).
    Simulate,
    /// Train an encoder on a dataset.
    Train,
    /// Compute a global attribution map from a checkpoint.
    Attribute,
    /// Score an attribution map against the ground truth.
    Evaluate,
    /// Run the mode × regularization × method × seed grid.
    Benchmark,
    /// Run the theory checks and/or summarize claims and benchmark results.
    Report,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut cfg = tsattr::config::RunConfig::parse(&text, &cli.overrides).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(out) = cli.output {
        cfg.output = Some(out);
    }
    cfg.force |= cli.force;
    let jobs = cli.jobs.unwrap_or(1).max(1);
    // Only fails if a pool already exists, which is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    match cli.command {
        Command::Generate => commands::generate(&cfg),
        Command::Simulate => commands::simulate(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Attribute => commands::attribute(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Benchmark => commands::benchmark(&cfg, jobs),
        Command::Report => report::report(&cfg, jobs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
