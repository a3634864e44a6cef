use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sqlossflow_cli::{run, Command, Options};

/// Square-loss gradient flow and SGD experiments on deep ReLU networks.
#[derive(Parser, Debug)]
#[command(name = "sqlossflow", version)]
struct Cli {
    /// What to run; must match the config's `command` field.
    #[arg(value_enum)]
    command: Command,
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Parallel runs for sweeps.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let opts = Options {
        jobs: cli.jobs,
        output_dir: cli.output_dir,
    };
    match run(cli.command, &cli.config, &opts) {
        Ok(outcome) => {
            println!(
                "{} run(s) written to {}",
                outcome.manifest.runs.len().max(outcome.manifest.reports.len()),
                outcome.output_dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
