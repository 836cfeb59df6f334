//! Command-line orchestration of the shift-share pipeline.

pub mod config;
pub mod error;
pub mod manifest;
pub mod speccurve;
pub mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::RunConfig;
use error::{CliError, CliResult};
use manifest::Outputs;
use stages::Data;

#[derive(Debug, Parser)]
#[command(name = "shiftshare", version, about = "Model-based shift-share IV pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate a world and write its panels and truth.json.
    Simulate,
    /// Load and validate input panels.
    Ingest,
    /// Estimate the location-choice model and predicted probabilities.
    ChoiceFit,
    /// Build the Bartik instruments.
    BuildIv,
    /// Estimate the productivity equations by 2SLS and FE-OLS.
    Fit,
    /// Event-study and distributed-lag fits.
    EventStudy,
    /// Rotemberg weights, share balance, distance rings and the origin-level
    /// reformulation.
    Diagnose,
    /// Within-state permutation placebo.
    Placebo,
    /// Tax-equalisation counterfactual.
    Counterfactual,
    /// Specification curve over the configured grid.
    SpecCurve,
    /// Every stage in dependency order.
    Run,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Ingest => "ingest",
            Command::ChoiceFit => "choice-fit",
            Command::BuildIv => "build-iv",
            Command::Fit => "fit",
            Command::EventStudy => "event-study",
            Command::Diagnose => "diagnose",
            Command::Placebo => "placebo",
            Command::Counterfactual => "counterfactual",
            Command::SpecCurve => "spec-curve",
            Command::Run => "run",
        }
    }
}

/// Configuration file plus command-line overrides.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the command; on failure every file it wrote is removed.
pub fn execute(cli: &Cli) -> CliResult<PathBuf> {
    let cfg = resolve_config(cli)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let mut out = Outputs::new(&cfg.out_dir)?;
    match pool.install(|| run_command(cli.command, &cfg, &mut out)) {
        Ok(()) => out.finish(cli.command.name(), &cfg),
        Err(e) => {
            out.discard();
            Err(e)
        }
    }
}

pub fn run_command(cmd: Command, cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let data: Data = stages::load_data(cfg, out)?;
    match cmd {
        Command::Simulate => return stages::simulate(&data, out),
        Command::Ingest => return stages::ingest(&data, out),
        Command::SpecCurve => return spec_curve(cfg, &data, out),
        _ => {}
    }
    let base = stages::baseline(cfg, &data, out)?;
    match cmd {
        Command::ChoiceFit => stages::choice_fit(&data, &base, out),
        Command::BuildIv => stages::build_iv(&data, &base, out),
        Command::Fit => stages::fit(cfg, &data, &base, out),
        Command::EventStudy => stages::event_study(cfg, &base, out),
        Command::Diagnose => stages::diagnose(cfg, &data, &base, out),
        Command::Placebo => stages::placebo(cfg, &data, &base, out),
        Command::Counterfactual => stages::counterfactual(cfg, &data, &base, out),
        Command::Run => {
            if data.world.is_some() {
                stages::simulate(&data, out)?;
            }
            stages::ingest(&data, out)?;
            stages::choice_fit(&data, &base, out)?;
            stages::build_iv(&data, &base, out)?;
            stages::fit(cfg, &data, &base, out)?;
            stages::event_study(cfg, &base, out)?;
            stages::diagnose(cfg, &data, &base, out)?;
            stages::placebo(cfg, &data, &base, out)?;
            stages::counterfactual(cfg, &data, &base, out)?;
            spec_curve(cfg, &data, out)
        }
        Command::Simulate | Command::Ingest | Command::SpecCurve => unreachable!("handled above"),
    }
}

fn spec_curve(cfg: &RunConfig, data: &Data, out: &mut Outputs) -> CliResult<()> {
    let curve = speccurve::run_spec_curve(cfg, &data.panels)?;
    curve.write_csv(&out.file("spec_curve.csv")).map_err(|source| CliError::Stage { stage: "spec-curve", source })?;
    out.write_json("spec_curve.json", &curve)?;
    out.switch("weak_iv_tau", cfg.weak_iv_tau);
    Ok(())
}
