//! `fcgno`: dataset generation, training, benchmarking and report assembly
//! for learned-preconditioner experiments on 2D elliptic systems.
//!
//! Exit codes: 0 on success, 1 when `--strict` is set and any bench cell
//! failed to converge, 2 on configuration errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fcgno_core::bench::{self, ExperimentConfig};
use fcgno_core::io;
use fcgno_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fcgno", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to a `key = value` configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Inline overrides, repeatable: `--set epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Base directory for run outputs (default `runs/`).
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample problems, run the residual harvest, persist the dataset.
    GenData {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Train the operator on a persisted dataset.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare the classical preconditioners (and optionally a trained
    /// checkpoint) over fresh test instances.
    Bench {
        #[command(flatten)]
        common: ConfigArgs,
        /// Checkpoint directory produced by train.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Exit nonzero when any cell fails to converge.
        #[arg(long)]
        strict: bool,
    },
    /// Combine bench reports into tables and figure CSVs.
    Report {
        /// One or more `report.json` paths.
        paths: Vec<PathBuf>,
        /// Output directory for tables and figure data.
        #[arg(long, default_value = "runs/report")]
        out: PathBuf,
    },
}

fn load_config(common: &ConfigArgs) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&common.config)?;
    let mut config = ExperimentConfig::parse(&text)?;
    for s in &common.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("--set expects KEY=VALUE, got '{s}'"))
        })?;
        config.set(k.trim(), v.trim())?;
    }
    config.validate()?;
    Ok(config)
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { common } => {
            let config = load_config(&common)?;
            let run_dir = io::make_run_dir(&common.out, &config.to_text())?;
            std::fs::write(run_dir.join("config.resolved"), config.to_text())?;
            let dir = bench::cmd_gen_data(&config, &run_dir)?;
            println!("dataset written to {}", dir.display());
            Ok(false)
        }
        Command::Train { common, data } => {
            let config = load_config(&common)?;
            let run_dir = io::make_run_dir(&common.out, &config.to_text())?;
            std::fs::write(run_dir.join("config.resolved"), config.to_text())?;
            let ckpt = bench::cmd_train(&config, &data, &run_dir)?;
            println!("checkpoint written to {}", ckpt.display());
            println!("training curve: {}", run_dir.join("training_curve.csv").display());
            Ok(false)
        }
        Command::Bench { common, checkpoint, strict } => {
            let config = load_config(&common)?;
            let run_dir = io::make_run_dir(&common.out, &config.to_text())?;
            let report = bench::cmd_bench(&config, checkpoint.as_deref(), &run_dir)?;
            print!("{}", bench::render_markdown(std::slice::from_ref(&report)));
            println!("report: {}", run_dir.join("report.json").display());
            let any_nc = report
                .methods
                .iter()
                .filter(|m| m.method != "cg_diag")
                .any(|m| m.stats.iter().any(|s| s.not_converged > 0));
            if checkpoint.is_none() {
                println!("note: no checkpoint given; learned-preconditioner row skipped");
            }
            Ok(strict && any_nc)
        }
        Command::Report { paths, out } => {
            let markdown = bench::build_report(&paths, &out)?;
            print!("{markdown}");
            println!("tables and figure data written to {}", out.display());
            Ok(false)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(1),
        Err(e @ Error::InvalidConfig(_)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
