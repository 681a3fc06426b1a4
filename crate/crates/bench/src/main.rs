use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use psbench::commands;
use psbench::config::RunConfig;

#[derive(Parser)]
#[command(name = "psample", version, about = "Train models and benchmark predictive sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model and forecaster; writes checkpoint and curves.
    Train(Args),
    /// Measure call percentages per strategy, batch size and seed.
    Bench(Args),
    /// Write sample, mistake and convergence maps as PGM images.
    Maps(Args),
    /// Reparametrization and representation-sharing ablation.
    Ablate(Args),
    /// Randomized exactness suite, plus replay of stored run records.
    Verify(Args),
    /// Print the resolved configuration as JSON.
    Config(Args),
}

#[derive(clap::Args)]
struct Args {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Field overrides such as --train.steps=100 or --bench.seeds=[0,1].
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (cmd, args): (fn(&RunConfig) -> anyhow::Result<()>, Args) = match cli.command {
        Command::Train(a) => (commands::cmd_train, a),
        Command::Bench(a) => (commands::cmd_bench, a),
        Command::Maps(a) => (commands::cmd_maps, a),
        Command::Ablate(a) => (commands::cmd_ablate, a),
        Command::Verify(a) => (commands::cmd_verify, a),
        Command::Config(a) => (
            |c| {
                println!("{}", serde_json::to_string_pretty(c)?);
                Ok(())
            },
            a,
        ),
    };
    let config = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    cmd(&config)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(psbench::exit_code(&e))
        }
    }
}
