//! `hsps`: simulate, analyze and fit heralded single-photon source data.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "hsps",
    version,
    about = "Heralded single-photon source simulator and analysis tools"
)]
struct Cli {
    /// Experiment config (TOML). Built-in defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `run.seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for simulation; defaults to available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output file; standard output when omitted.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,

    /// Output format for event files and reports.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Binary,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a Monte Carlo detection simulation and write an event file.
    Simulate,

    /// Tally event files and report rates, CAR, heralding efficiency and g²ₕ(0).
    Analyze {
        /// Event files (text or binary). Multiple files are merged.
        #[arg(required = true)]
        events: Vec<PathBuf>,

        /// Coincidence window W in pulse slots; overrides the config.
        #[arg(long)]
        max_delay: Option<u64>,

        /// Also write the delay histogram CSV here.
        #[arg(long)]
        histogram: Option<PathBuf>,
    },

    /// Simulate one run per peak pump power and write a sweep CSV.
    Sweep {
        /// Peak powers in W, comma separated; overrides `analysis.powers_w`.
        #[arg(long, value_delimiter = ',')]
        powers: Vec<f64>,
    },

    /// Fit a sweep CSV and report coefficients and noise fractions.
    Fit {
        sweep: PathBuf,

        /// Largest power included in the fits; overrides the config.
        #[arg(long)]
        max_power: Option<f64>,

        /// Write a CAR versus coincidence-rate curve CSV here.
        #[arg(long)]
        curve: Option<PathBuf>,

        /// Number of powers on the curve, evenly spaced over the fit domain.
        #[arg(long, default_value_t = 50)]
        curve_points: usize,
    },

    /// Emit analytic g²ₕ(0) and CAR curves as CSV.
    Curves {
        /// Smallest mean pair number of the μ grid.
        #[arg(long, default_value_t = 0.001)]
        mu_min: f64,

        /// Largest mean pair number of the μ grid.
        #[arg(long, default_value_t = 1.0)]
        mu_max: f64,

        /// Points on the μ grid.
        #[arg(long, default_value_t = 100)]
        points: usize,

        /// Space the μ grid logarithmically.
        #[arg(long)]
        log: bool,

        /// CAR values to tabulate instead of a μ grid, comma separated.
        #[arg(long, value_delimiter = ',')]
        car: Vec<f64>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let ctx = commands::Context::new(
        cli.config.as_deref(),
        cli.seed,
        cli.threads,
        cli.output,
        cli.format,
    )?;
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Analyze {
            events,
            max_delay,
            histogram,
        } => commands::analyze(&ctx, &events, max_delay, histogram.as_deref()),
        Command::Sweep { powers } => commands::sweep(&ctx, &powers),
        Command::Fit {
            sweep,
            max_power,
            curve,
            curve_points,
        } => commands::fit(&ctx, &sweep, max_power, curve.as_deref(), curve_points),
        Command::Curves {
            mu_min,
            mu_max,
            points,
            log,
            car,
        } => commands::curves(&ctx, mu_min, mu_max, points, log, &car),
    }
}
