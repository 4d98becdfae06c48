use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clustershare::{cmd_dump_clusters, cmd_eval, cmd_train, Error};

/// Train, evaluate and inspect cluster-layer multi-task models.
#[derive(Parser)]
#[command(name = "clustershare", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print per-task test accuracy of a checkpoint and write it as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A run config (its held-out folds are evaluated) or a directory of task files.
        #[arg(long)]
        data: PathBuf,
        /// CSV output path [default: eval.csv next to the checkpoint].
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the task groups of every cluster layer.
    DumpClusters {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

const EXIT_INVALID: u8 = 1;
const EXIT_DIVERGED: u8 = 2;

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Train { config, out, seed } => {
            let paths = cmd_train(&config, &out, seed)?;
            println!("wrote {}", paths.checkpoint.display());
        }
        Command::Eval { checkpoint, data, csv } => {
            let csv = csv.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("eval.csv"));
            let table = cmd_eval(&checkpoint, &data, Some(&csv))?;
            print!("{table}");
        }
        Command::DumpClusters { checkpoint } => print!("{}", cmd_dump_clusters(&checkpoint)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INVALID)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::InvalidConfig(fields) = &e {
                for f in fields {
                    eprintln!("  {f}");
                }
            }
            match e {
                Error::Diverged { .. } => ExitCode::from(EXIT_DIVERGED),
                _ => ExitCode::from(EXIT_INVALID),
            }
        }
    }
}
