use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Parser, Subcommand, ValueEnum};

use cke::experiments::{
    self, oracle_report, read_json, realizability_report, run_grid_search, run_sweep_with, Execution, ExperimentError,
    Format, GridSearchConfig, Scenario, SystemSpec,
};

#[derive(Debug, Parser)]
#[command(name = "cke", version, about = "Coherent-classical estimation experiments")]
struct Cli {
    /// Riccati residual tolerance (realizability tolerance for `realizable`).
    #[arg(long, global = true)]
    tol: Option<f64>,

    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Sweep output format.
    #[arg(long, global = true, value_enum)]
    format: Option<OutputFormat>,

    /// Keep going when individual sweep rows fail.
    #[arg(long, global = true)]
    allow_failures: bool,

    /// Evaluate rows on the current thread only.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sweep the homodyne angle over a scenario grid.
    Sweep { scenario: PathBuf },
    /// Check physical realizability of a system file.
    Realizable { system: PathBuf },
    /// Search squeezer controllers and angles for the lowest cost.
    Gridsearch { config: PathBuf },
    /// Compare the Riccati cost with the joint-Lyapunov oracle at one angle.
    Oracle {
        scenario: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        theta: f64,
    },
}

fn open_out(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p).map_err(|source| {
            ExperimentError::Io {
                path: p.to_owned(),
                source,
            }
        })?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn write_json_value<T: serde::Serialize>(value: &T, path: Option<&Path>) -> anyhow::Result<()> {
    let mut out = open_out(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn load_scenario(path: &Path, tol: Option<f64>) -> anyhow::Result<Scenario> {
    let mut s = Scenario::from_path(path)?;
    if let Some(t) = tol {
        s.solver.tol = t;
    }
    Ok(s)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match &cli.command {
        Command::Sweep { scenario } => {
            let s = load_scenario(scenario, cli.tol)?;
            let result = run_sweep_with(&s, exec).with_context(|| format!("sweep {}", scenario.display()))?;
            let format = match cli.format {
                Some(OutputFormat::Csv) => Format::Csv,
                Some(OutputFormat::Json) => Format::Json,
                None => s.output.as_ref().map_or(Format::Csv, |o| o.format),
            };
            let path = cli.out.clone().or_else(|| s.output.as_ref().map(|o| o.path.clone()));
            match &path {
                Some(p) => experiments::emit(&result, format, p)?,
                None => {
                    let mut out = std::io::stdout().lock();
                    experiments::write_result(&result, format, &mut out)?;
                }
            }
            if !cli.allow_failures {
                result.check()?;
            }
        }
        Command::Realizable { system } => {
            let spec: SystemSpec = read_json(system)?;
            let tol = cli.tol.unwrap_or(cke::doubled::DEFAULT_TOL);
            let report =
                realizability_report(&spec, tol).with_context(|| format!("realizable {}", system.display()))?;
            write_json_value(&report, cli.out.as_deref())?;
        }
        Command::Gridsearch { config } => {
            let mut cfg: GridSearchConfig = read_json(config)?;
            if let Some(t) = cli.tol {
                cfg.solver.tol = t;
            }
            let result = run_grid_search(&cfg, exec).with_context(|| format!("gridsearch {}", config.display()))?;
            write_json_value(&result, cli.out.as_deref())?;
        }
        Command::Oracle { scenario, theta } => {
            let s = load_scenario(scenario, cli.tol)?;
            let report = oracle_report(&s, *theta)?;
            write_json_value(&report, cli.out.as_deref())?;
            if !report.agrees {
                anyhow::bail!(
                    "oracle cost {} disagrees with Riccati cost {} (relative gap {:.3e})",
                    report.oracle_cost,
                    report.cost,
                    report.relative_gap
                );
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<ExperimentError>() {
        Some(e) if e.is_config() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
