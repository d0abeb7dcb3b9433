use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use transfer_lab::harness::{self, parse_variants, ExperimentConfig};
use transfer_lab::Error;

#[derive(Parser)]
#[command(version, about = "Transfer-learning experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model and save the checkpoint transfer variants start from.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the variant-by-seed matrix and write the report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of RI,FE,1FT,2FT,3FT,AllFT,FTED.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        runs: Option<usize>,
        /// 40 epochs with batch size 32.
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-aggregate the run files in an output directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(Error),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn load(config: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig, Failure> {
    let mut c = ExperimentConfig::load(config).map_err(Failure::Config)?;
    if let Some(out) = out {
        c.out_dir = out;
    }
    Ok(c)
}

fn print_table(table: &harness::ResultsTable) -> Result<(), Failure> {
    print!("{table}");
    match table.failed_runs() {
        0 => Ok(()),
        n => Err(Failure::Run(format!("{n} run(s) failed"))),
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Pretrain { config, out } => {
            let c = load(&config, out)?;
            c.validate().map_err(Failure::Config)?;
            let r = harness::pretrain_source(&c)?;
            println!(
                "source checkpoint {} sha256={} val_accuracy={:.4} epochs={}",
                r.checkpoint.display(),
                r.sha256,
                r.val_accuracy,
                r.epochs_trained
            );
            if let Some(w) = r.warning {
                eprintln!("warning: {w}");
            }
            Ok(())
        }
        Command::Run {
            config,
            variants,
            runs,
            desk,
            out,
        } => {
            let mut c = load(&config, out)?;
            if let Some(v) = variants {
                c.variants = parse_variants(&v).map_err(Failure::Config)?;
            }
            if let Some(n) = runs {
                c.runs = n;
            }
            if desk {
                c.apply_desk();
            }
            c.validate().map_err(Failure::Config)?;
            let table = harness::run_experiment(&c)?;
            print_table(&table)
        }
        Command::Report { out } => {
            let table = harness::report(&out)?;
            print_table(&table)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
