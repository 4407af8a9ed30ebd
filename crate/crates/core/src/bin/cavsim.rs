//! Command-line front end: run scenarios, sweep a parameter axis, render
//! reports from finished runs, and generate synthetic corridor traces.
//!
//! Exit codes: 0 success, 1 runtime failure (including a sweep with failed
//! points), 2 usage or configuration mistakes.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cavsim_core::engine::RngHub;
use cavsim_core::mobility::{synth_corridor, write_trace, MobilityError};
use cavsim_core::runner::{self, RunnerError, SweepAxis};
use cavsim_core::scenario::{Scenario, ScenarioError};

#[derive(Parser)]
#[command(
    name = "cavsim",
    version,
    about = "Discrete-event corridor simulator comparing broadcast and cellular vehicle networking"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute one scenario and write its artifact set
    Run {
        /// Scenario configuration file
        config: Option<PathBuf>,
        /// Built-in scenario name instead of a config file
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// Output directory (default: the scenario's output_dir)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a scenario across one axis and collect sweep.csv
    Sweep {
        /// Scenario configuration file
        config: Option<PathBuf>,
        /// Built-in scenario name instead of a config file
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// Axis to vary: speed, rate_vpm, or stack
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Output directory (default: the scenario's output_dir)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: CAVSIM_WORKERS, then 4)
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Summarize a finished run or sweep directory
    Report {
        /// Directory holding summary.json or sweep.csv
        dir: PathBuf,
    },
    /// Write a synthetic corridor trace file
    GenTrace {
        /// Trace file to create
        #[arg(long)]
        out: PathBuf,
        /// Vehicle arrivals per minute
        #[arg(long, default_value_t = 18.0)]
        rate_vpm: f64,
        /// Constant vehicle speed
        #[arg(long, default_value_t = 45.0)]
        speed_mph: f64,
        /// Corridor length in meters
        #[arg(long, default_value_t = 2000.0)]
        length_m: f64,
        /// Arrival window in seconds
        #[arg(long, default_value_t = 120.0)]
        duration_s: f64,
        /// Random seed
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

enum CliError {
    Runner(RunnerError),
    Usage(String),
    Trace(MobilityError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runner(e) => e.exit_code() as u8,
            CliError::Usage(_) => 2,
            CliError::Trace(MobilityError::NonPositiveParam { .. }) => 2,
            CliError::Trace(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Runner(e) => e.fmt(f),
            CliError::Usage(msg) => msg.fmt(f),
            CliError::Trace(e) => e.fmt(f),
        }
    }
}

impl From<RunnerError> for CliError {
    fn from(e: RunnerError) -> Self {
        CliError::Runner(e)
    }
}

fn scenario_from(config: Option<PathBuf>, preset: Option<String>) -> Result<Scenario, CliError> {
    match (config, preset) {
        (Some(path), None) => Ok(runner::load_scenario(&path)?),
        (None, Some(name)) => Ok(Scenario::preset(&name)
            .map_err(|e| RunnerError::Scenario(ScenarioError::from(e)))?),
        (None, None) => Err(CliError::Usage(
            "pass a scenario config file or --preset <name>".into(),
        )),
        (Some(_), Some(_)) => unreachable!("clap rejects config together with --preset"),
    }
}

fn worker_count(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("CAVSIM_WORKERS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(4)
    .max(1)
}

fn dispatch(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.cmd {
        Cmd::Run { config, preset, out } => {
            let sc = scenario_from(config, preset)?;
            let dir = out.unwrap_or_else(|| sc.output_dir.clone());
            let result = runner::run_to_dir(&sc, &dir)?;
            println!(
                "run complete: {} flows, {} events, {} ms wall clock",
                result.flows.len(),
                result.events,
                result.wall_ms
            );
            println!("artifacts under {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep {
            config,
            preset,
            axis,
            mut values,
            out,
            workers,
        } => {
            let sc = scenario_from(config, preset)?;
            let axis = SweepAxis::parse(&axis).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown axis {axis:?}: expected speed, rate_vpm, or stack"
                ))
            })?;
            values.retain(|v| !v.trim().is_empty());
            let dir = out.unwrap_or_else(|| sc.output_dir.clone());
            let report = runner::run_sweep(&sc, axis, &values, &dir, worker_count(workers))?;
            println!(
                "sweep complete: {} rows, {} failed points; {}",
                report.rows.len(),
                report.failures,
                report.csv_path.display()
            );
            if report.failures > 0 {
                Ok(ExitCode::FAILURE)
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Cmd::Report { dir } => {
            let output = runner::build_report(&dir)?;
            print!("{}", output.text);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::GenTrace {
            out,
            rate_vpm,
            speed_mph,
            length_m,
            duration_s,
            seed,
        } => {
            let mut rng = RngHub::new(seed);
            let samples =
                synth_corridor(rate_vpm, speed_mph, length_m, duration_s, rng.stream("corridor"))
                    .map_err(CliError::Trace)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|source| {
                    CliError::Runner(RunnerError::Io { path: parent.to_path_buf(), source })
                })?;
            }
            write_trace(&out, &samples).map_err(CliError::Trace)?;
            let vehicles = samples
                .iter()
                .map(|s| s.vehicle)
                .collect::<std::collections::BTreeSet<_>>()
                .len();
            println!(
                "wrote {} samples for {} vehicles to {}",
                samples.len(),
                vehicles,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
