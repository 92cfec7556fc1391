mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::CliError;

/// Train circuits, certify inference, and run circuit-guided inpainting on toy images.
#[derive(Parser, Debug)]
#[command(name = "pcguide", version)]
struct Cli {
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random substream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override a configuration key, e.g. `--set train_pc.em.num_iterations=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a toy dataset.
    GenData,
    /// Build a PD circuit and fit it with EM.
    TrainPc,
    /// Fit a patch codebook, optionally with a circuit over its codes.
    TrainCodebook,
    /// Guided and unguided inpainting with metrics.
    Inpaint,
    /// Sample images matching patches of several references.
    Fuse,
    /// Run the oracle certification battery.
    Verify,
    /// Time inference passes and the guided loop.
    Bench,
}

fn run(cli: &Cli) -> Result<serde_json::Value, CliError> {
    let cfg = config::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::TrainPc => commands::train_pc(&cfg),
        Command::TrainCodebook => commands::train_codebook(&cfg),
        Command::Inpaint => commands::inpaint(&cfg),
        Command::Fuse => commands::fuse(&cfg),
        Command::Verify => commands::verify(&cfg),
        Command::Bench => commands::bench(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code());
        }
    };
    match run(&cli) {
        Ok(summary) => {
            let quiet = matches!(cli.command, Command::Bench) && summary["out"].is_null();
            if !quiet {
                println!("{}", serde_json::to_string_pretty(&summary).expect("json values serialize"));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
