//! `dagmix` command line: generate synthetic data, train, and report.

mod config;
mod generate;
mod report;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "dagmix", version, about = "Causal DAG discovery over latent clusters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset described by the config's [data] table.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a dataset directory with the config's [train] table.
    Train {
        /// Required unless resuming.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Summarize a finished run against the dataset labels.
    Report {
        #[arg(long = "run")]
        run_dir: PathBuf,
        /// Defaults to the dataset the run was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let cfg = config::load(&config)?;
            let Some(mut data) = cfg.data else {
                anyhow::bail!("{} has no [data] table", config.display());
            };
            if let Some(s) = seed {
                data.seed = s;
            }
            generate::run(&data, &out)?;
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
            epochs,
        } => {
            let cfg = match &config {
                Some(p) => config::load(p)?.train,
                None if resume.is_some() => None,
                None => anyhow::bail!("--config is required unless --resume is given"),
            };
            train::run(train::TrainArgs {
                config: cfg,
                data_dir: &data,
                out: &out,
                seed,
                resume: resume.as_deref(),
                epochs,
            })?;
        }
        Command::Report { run_dir, data } => {
            report::run(&run_dir, data.as_deref())?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<dagmix::Error>(), Some(dagmix::Error::Numerical(_))));
    if numerical {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DAGMIX_LOG", "info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
