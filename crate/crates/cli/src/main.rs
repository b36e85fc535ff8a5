use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use hyperkg::data::Split;
use hyperkg::eval::TiePolicy;
use hyperkg_cli::commands::{self, HypernetworkSweep};

#[derive(Parser)]
#[command(
    name = "hyperkg",
    version,
    about = "Link prediction with hypernetwork-generated convolution filters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a dataset directory and print its statistics.
    Prepare { dir: PathBuf },
    /// Train a model from a config file.
    Train { config: PathBuf },
    /// Filtered ranking metrics of a checkpoint on one split.
    Eval {
        checkpoint: PathBuf,
        dir: PathBuf,
        split: Split,
        /// Per-triple rank dump; defaults to `<split>.ranks.tsv` next to the checkpoint.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// `optimistic` or `mean`.
        #[arg(long, default_value = "optimistic")]
        ties: TiePolicy,
    },
    /// Train and evaluate one model per filter length.
    AblateFilters {
        config: PathBuf,
        /// Comma-separated filter lengths, e.g. `1,2,3,6,9,12`.
        #[arg(value_delimiter = ',', required = true)]
        lengths: Vec<usize>,
        /// `on`, `off` or `both`.
        #[arg(long, default_value = "both")]
        hypernetwork: HypernetworkSweep,
    },
    /// Print the filters and relation matrix of one relation.
    Inspect {
        checkpoint: PathBuf,
        relation: String,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { dir } => println!("{}", commands::prepare(&dir)?),
        Command::Train { config } => {
            let summary = commands::train_from_config(&config, |r| eprintln!("{}", r.log_line()))?;
            print!("{}", summary.description);
            println!("final checkpoint {}", summary.final_checkpoint.display());
            if let Some(best) = summary.best_checkpoint {
                println!("best checkpoint {}", best.display());
            }
        }
        Command::Eval {
            checkpoint,
            dir,
            split,
            dump,
            ties,
        } => {
            let dump = match dump {
                Some(d) => d,
                None => checkpoint
                    .parent()
                    .context("checkpoint path has no parent")?
                    .join(format!("{}.ranks.tsv", split.name())),
            };
            let report = commands::eval_checkpoint(&checkpoint, &dir, split, &dump, ties)?;
            print!("{}", report.table());
            println!("ranks written to {}", dump.display());
        }
        Command::AblateFilters {
            config,
            lengths,
            hypernetwork,
        } => {
            let rows = commands::ablate_filters(&config, &lengths, hypernetwork)?;
            print!("{}", commands::ablation_table(&rows));
        }
        Command::Inspect {
            checkpoint,
            relation,
        } => print!("{}", commands::inspect(&checkpoint, &relation)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
