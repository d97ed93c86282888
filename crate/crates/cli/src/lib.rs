//! Command-line front end for the HCT gait diagnosis pipeline.
//!
//! Subcommands: `ingest`, `train`, `cv`, `diagnose`. Runs are driven by a
//! flat key/value config file with flag overrides; the seed is mandatory
//! and every run writes a manifest so results can be reproduced
//! byte-for-byte.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};
use hct_core::Result;

#[derive(Debug, Parser)]
#[command(
    name = "hct",
    about = "Two-step gait diagnosis: PD detection and H&Y staging from 18-channel VGRF walks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Flat key/value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// RNG seed; required, there is no wall-clock default.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Task: detection, staging, or (cv only) composed.
    #[arg(long)]
    pub task: Option<String>,
    /// Output directory for reports, checkpoints, and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Cross-validation fold count.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Worker threads for fold-level parallelism (0 = folds, capped at
    /// hardware parallelism).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Replace an existing run in the output directory.
    #[arg(long)]
    pub overwrite: bool,
    /// Dataset directory of walk files (falls back to $HCT_DATA_DIR).
    #[arg(long = "data-dir")]
    pub data_dir: Option<PathBuf>,
    /// Label metadata table.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

impl CommonArgs {
    fn load(&self) -> Result<RunConfig> {
        let overrides = Overrides {
            data_dir: self.data_dir.clone(),
            labels: self.labels.clone(),
            out_dir: self.out.clone(),
            seed: self.seed,
            task: self.task.clone(),
            folds: self.folds,
            jobs: self.jobs,
            overwrite: self.overwrite,
        };
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan and summarize the dataset: subjects, walks, segments per class.
    Ingest(CommonArgs),
    /// Train one model (detection or staging) and write a checkpoint.
    Train(CommonArgs),
    /// Subject-level k-fold cross-validation with per-fold reports.
    Cv(CommonArgs),
    /// Two-step diagnosis of one walk file.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Detection (two-class) checkpoint.
    #[arg(long)]
    pub binary: PathBuf,
    /// Staging (multi-class) checkpoint.
    #[arg(long)]
    pub staging: PathBuf,
    /// Walk file to diagnose.
    #[arg(long)]
    pub walk: PathBuf,
}

/// Dispatches one parsed invocation, writing human output to `out`.
pub fn run(cli: Cli, out: &mut impl std::io::Write) -> Result<()> {
    match cli.command {
        Command::Ingest(args) => commands::cmd_ingest(&args.load()?, out),
        Command::Train(args) => commands::cmd_train(&args.load()?, out),
        Command::Cv(args) => commands::cmd_cv(&args.load()?, out),
        Command::Diagnose(args) => {
            let config = args.common.load()?;
            commands::cmd_diagnose(&config, &args.binary, &args.staging, &args.walk, out)
        }
    }
}
