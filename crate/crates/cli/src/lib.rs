//! Command-line experiments: teacher data generation, training and evaluation, matched
//! sweeps, path-ensemble analysis and ablation, virtual neurophysiology and reports.

pub mod commands;
pub mod config;
pub mod fail;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use fail::Result;

#[derive(Debug, Parser)]
#[command(name = "sysid", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command that reads a configuration.
#[derive(Debug, clap::Args)]
pub struct Common {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the configuration and the environment.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct DataArgs {
    /// Dataset container; overrides the configuration.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Keep only the first K trials of every stimulus.
    #[arg(long, value_name = "K")]
    pub truncate_trials: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a teacher dataset and save the generating model.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Fraction of the training split to use.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the recurrent grid with matched feedforward (and multi-path) twins.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Concurrent training processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Path-ensemble statistics of a recurrent or multi-path checkpoint.
    Multipath {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "multipath")]
        out: PathBuf,
    },
    /// Retrain multi-path models with windows of adjacent path lengths removed.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Number of adjacent lengths removed together.
        #[arg(long, default_value_t = 3)]
        windows: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Tuning analyses of a checkpoint, or of the built-in suppressive circuit.
    Neurophys {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Aggregate tables over the results below a directory.
    Report {
        #[arg(long)]
        results: PathBuf,
        /// Defaults to `<results>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-figure CSVs for external plotting.
        #[arg(long)]
        plot_data: bool,
    },
}

fn load(common: &Common, data: Option<&DataArgs>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(common.config.as_deref())?;
    if let Some(d) = data {
        if d.dataset.is_some() {
            config.dataset.clone_from(&d.dataset);
        }
        if d.truncate_trials.is_some() {
            config.truncate_trials = d.truncate_trials;
        }
    }
    config.validate()?;
    Ok(config)
}

pub fn run(cli: Cli) -> Result<()> {
    use commands::*;
    match cli.command {
        Command::GenData { common, seed } => {
            let mut config = load(&common, None)?;
            config.seed = seed.unwrap_or(config.seed);
            data::gen_data(&config, &out_dir(&config, common.out.as_deref()))
        }
        Command::Train {
            common,
            data,
            seed,
            fraction,
        } => {
            let mut config = load(&common, Some(&data))?;
            config.seed = seed.unwrap_or(config.seed);
            config.train_fraction = fraction.unwrap_or(config.train_fraction);
            config.validate()?;
            train::train(&config, &out_dir(&config, common.out.as_deref())).map(drop)
        }
        Command::Eval {
            common,
            data,
            checkpoint,
        } => {
            let config = load(&common, Some(&data))?;
            train::eval(&config, &checkpoint, &out_dir(&config, common.out.as_deref())).map(drop)
        }
        Command::Sweep { common, data, jobs } => {
            let config = load(&common, Some(&data))?;
            sweep::sweep(&config, &out_dir(&config, common.out.as_deref()), jobs)
        }
        Command::Multipath { checkpoint, out } => multipath::multipath(&checkpoint, &out),
        Command::Ablate {
            common,
            data,
            windows,
            jobs,
        } => {
            let config = load(&common, Some(&data))?;
            ablate::ablate(&config, windows, &out_dir(&config, common.out.as_deref()), jobs)
        }
        Command::Neurophys { common, checkpoint } => {
            let config = load(&common, None)?;
            neurophys::neurophys(&config, checkpoint.as_deref(), &out_dir(&config, common.out.as_deref()))
        }
        Command::Report { results, out, plot_data } => {
            let out = out.unwrap_or_else(|| results.join("report"));
            report::report(&results, &out, plot_data).map(drop)
        }
    }
}
