//! Command-line driver for the discovery pipeline. Every subcommand writes its
//! artifacts plus `manifest.json` into `--out`.

mod commands;
mod config;
mod failure;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sindy_bsde::benchmark::Scale;

use crate::commands::Outcome;
use crate::config::RunConfig;
use crate::failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "sindy-bsde", version, about = "Identify, predict and generate option dynamics from a stock/option path pair")]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true, env = "SINDY_BSDE_CONFIG")]
    config: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long, global = true, env = "SINDY_BSDE_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "SINDY_BSDE_OUT", default_value = "out")]
    out: PathBuf,
    /// Benchmark scale, overriding the config.
    #[arg(long, global = true, env = "SINDY_BSDE_SCALE", value_parser = parse_scale)]
    scale: Option<Scale>,
    #[command(subcommand)]
    command: Command,
}

fn parse_scale(s: &str) -> Result<Scale, String> {
    s.parse().map_err(|e: sindy_bsde::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a stock path and its call prices into path.csv.
    Simulate,
    /// Fit the price surface on the training prefix of a path.
    Fit {
        #[arg(long)]
        input: PathBuf,
    },
    /// Identify the law of the option price and print it.
    Discover {
        #[arg(long)]
        input: PathBuf,
        /// Reuse a fitted surface instead of training one.
        #[arg(long)]
        surface: Option<PathBuf>,
    },
    /// One-step-ahead prediction over the held-out suffix.
    Predict {
        #[arg(long)]
        input: PathBuf,
    },
    /// Sample new path pairs from the law learned on the training prefix.
    Generate {
        #[arg(long)]
        input: PathBuf,
    },
    /// Align a tick file into a path pair and split it.
    Ingest {
        #[arg(long)]
        input: PathBuf,
    },
    /// Write a synthetic tick file with session gaps.
    Fixture,
    /// Run the recovery benchmark and compare with the ideal coefficients.
    Benchmark,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit { .. } => "fit",
            Command::Discover { .. } => "discover",
            Command::Predict { .. } => "predict",
            Command::Generate { .. } => "generate",
            Command::Ingest { .. } => "ingest",
            Command::Fixture => "fixture",
            Command::Benchmark => "benchmark",
        }
    }

    fn inputs(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        let show = |p: &Path| p.display().to_string();
        match self {
            Command::Fit { input }
            | Command::Predict { input }
            | Command::Generate { input }
            | Command::Ingest { input } => {
                m.insert("input", show(input));
            }
            Command::Discover { input, surface } => {
                m.insert("input", show(input));
                if let Some(s) = surface {
                    m.insert("surface", show(s));
                }
            }
            Command::Simulate | Command::Fixture | Command::Benchmark => {}
        }
        m
    }
}

#[derive(Serialize)]
struct Timing {
    wall_seconds: f64,
    stages: Vec<(String, f64)>,
}

/// Everything needed to replay the run. `timing` is the only field that
/// differs between identical runs.
#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    core_version: &'static str,
    subcommand: &'static str,
    inputs: BTreeMap<&'static str, String>,
    seed: u64,
    seeds: BTreeMap<&'static str, u64>,
    config: &'a RunConfig,
    outputs: &'a [String],
    status: String,
    timing: Timing,
}

fn run(cli: &Cli, started: Instant) -> Result<(), Failure> {
    let cfg = RunConfig::load(cli.config.as_deref())?.resolve(cli.seed, cli.scale)?;
    let dir = cli.out.as_path();
    let mut stages = Vec::new();
    let outcome: Outcome = match &cli.command {
        Command::Simulate => commands::simulate(&cfg, dir)?,
        Command::Fit { input } => commands::fit(&cfg, dir, input)?,
        Command::Discover { input, surface } => commands::discover_cmd(&cfg, dir, input, surface.as_ref())?,
        Command::Predict { input } => commands::predict(&cfg, dir, input)?,
        Command::Generate { input } => commands::generate(&cfg, dir, input)?,
        Command::Ingest { input } => commands::ingest(&cfg, dir, input)?,
        Command::Fixture => commands::fixture(&cfg, dir)?,
        Command::Benchmark => {
            let (o, t) = commands::benchmark(&cfg, dir)?;
            stages = t;
            o
        }
    };
    let manifest = Manifest {
        tool: "sindy-bsde",
        version: env!("CARGO_PKG_VERSION"),
        core_version: sindy_bsde::VERSION,
        subcommand: cli.command.name(),
        inputs: cli.command.inputs(),
        seed: cfg.seed,
        seeds: cfg.seeds(),
        config: &cfg,
        outputs: &outcome.files,
        status: outcome.error.as_ref().map_or_else(|| "ok".to_string(), |e| e.to_string()),
        timing: Timing { wall_seconds: started.elapsed().as_secs_f64(), stages },
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    print!("{}", outcome.stdout);
    match outcome.error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli, Instant::now()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sindy-bsde: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
