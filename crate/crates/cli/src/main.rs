//! `bnma`: validate inputs, reconstruct or emulate participant data, fit the
//! network meta-regression models and compare their intervals.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}", path = .0.display(), source = .1)]
    Read(PathBuf, std::io::Error),
    #[error("cannot write {path}: {source}", path = .0.display(), source = .1)]
    Write(PathBuf, std::io::Error),
    #[error("config: {0}")]
    Config(String),
    /// Input problems, one message per violation.
    #[error("{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Pipeline(#[from] bnma::pipelines::PipelineError),
    #[error(transparent)]
    Emulation(#[from] bnma::emulation::EmulationError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Read(..) | CliError::Config(_) | CliError::Invalid(_) | CliError::Emulation(_) => 2,
            CliError::Write(..) | CliError::Pipeline(_) => 1,
        }
    }
}

/// How a successful command ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Done,
    /// Outputs written but the convergence gate failed.
    Flagged,
}

#[derive(Debug, Parser)]
#[command(name = "bnma", version, about = "Bayesian network meta-regression for biomarker subgroups")]
struct Cli {
    /// Run file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Prints a run file with every setting at its default and exits.
    #[arg(long)]
    print_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Checks files, schemas and network connectivity.
    Validate,
    /// Rebuilds participant records from digitized Kaplan-Meier curves.
    ReconstructKm,
    /// Emulates trials from health records, one set per protocol.
    Emulate,
    /// Writes synthetic health records for the configured cohorts.
    SimulateEhr,
    /// Fits the configured model.
    Fit,
    /// Prints fit summaries and writes a combined forest CSV.
    Summarize {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
    },
    /// Interval width reductions of `other` relative to `baseline`.
    Compare { baseline: PathBuf, other: PathBuf },
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("this command needs --config <path>".into()))?;
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<Outcome, CliError> {
    if cli.print_defaults {
        let text = toml::to_string(&RunConfig::defaults()).map_err(|e| CliError::Config(e.to_string()))?;
        print!("{text}");
        return Ok(Outcome::Done);
    }
    let Some(command) = &cli.command else {
        return Err(CliError::Config("no subcommand given; see --help".into()));
    };
    match command {
        Command::Validate => commands::validate(&load(cli)?),
        Command::ReconstructKm => commands::reconstruct_km(&load(cli)?),
        Command::Emulate => commands::emulate(&load(cli)?),
        Command::SimulateEhr => commands::simulate_ehr(&load(cli)?),
        Command::Fit => commands::fit(&load(cli)?),
        Command::Summarize { summaries } => commands::summarize(summaries, cli.out.as_deref()),
        Command::Compare { baseline, other } => commands::compare(baseline, other, cli.out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Flagged) => ExitCode::from(3),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
