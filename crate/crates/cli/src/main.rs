use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fwave_cli::{execute, exit_code, Experiment, RunConfig};

/// Strongly damped wave and Westervelt experiments on polygonal and Koch domains.
#[derive(Parser)]
#[command(name = "fwave", version)]
struct Cli {
    /// TOML run configuration, or a manifest.json from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output` in the config (default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Triangulate the configured domain.
    Mesh,
    /// Dirichlet eigenpairs of the configured domain.
    Eigs,
    /// Solve the strongly damped wave equation.
    SolveLinear,
    /// Solve the Westervelt equation by fixed-point iteration.
    SolveWestervelt,
    /// Koch prefractal convergence study.
    Mosco,
    /// Inequality and stability checks.
    Verify,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let experiment = match cli.command {
        Command::Mesh => Experiment::Mesh,
        Command::Eigs => Experiment::Eigs,
        Command::SolveLinear => Experiment::SolveLinear,
        Command::SolveWestervelt => Experiment::SolveWestervelt,
        Command::Mosco => Experiment::Mosco,
        Command::Verify => Experiment::Verify,
    };
    if cli.threads == Some(0) {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    let cfg = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                return ExitCode::from(exit_code(&e) as u8);
            }
        },
        None => RunConfig::default(),
    };
    let out = cli
        .out
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    match execute(experiment, &cfg, &out, cli.threads) {
        Ok(m) => {
            eprintln!(
                "{}: {} artifacts in {} ({:.2} s)",
                experiment.name(),
                m.artifacts.len(),
                out.display(),
                m.wall_time_seconds
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
