use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use adinfohrl_cli::{cmd_eval, cmd_report, cmd_train, resolve_config, ConfigSources};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adinfohrl", version, about = "Train, evaluate and summarize adInfoHRL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed and write metrics, checkpoints and the resolved config.
    Train {
        /// TOML config file; missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. --set gamma=0.95 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Output directory (overrides output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace existing run directories.
        #[arg(long)]
        overwrite: bool,
        /// Comma-separated seeds, e.g. 1,2,3.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// adinfohrl, infohrl or td3.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Evaluate a checkpoint without exploration noise.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate evaluation returns across runs into a CSV table.
    Report {
        /// Run directories, or sweep directories containing them.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> adinfohrl_cli::Result<()> {
    let stdout = std::io::stdout();
    match cli.command {
        Command::Train { config, sets, out, overwrite, seeds, mode } => {
            let sources = ConfigSources { config, sets, mode, seeds, out };
            let config = resolve_config(&sources)?;
            let dirs = cmd_train(&config, overwrite, &mut stdout.lock())?;
            for dir in dirs {
                println!("wrote {}", dir.display());
            }
        }
        Command::Eval { checkpoint, episodes, seed } => {
            cmd_eval(&checkpoint, episodes, seed, &mut stdout.lock())?;
        }
        Command::Report { runs, out } => match out {
            Some(path) => {
                let mut buf = Vec::new();
                cmd_report(&runs, &mut buf)?;
                std::fs::write(&path, buf).map_err(|source| adinfohrl_cli::CliError::Io { path, source })?;
            }
            None => {
                cmd_report(&runs, &mut stdout.lock())?;
            }
        },
    }
    let _ = stdout.lock().flush();
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
