use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use curlhom_cli::{run, Command, RunOptions};

#[derive(Parser)]
#[command(name = "curlhom", version, about = "Curl-curl homogenisation on periodic measures")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Overrides the scenario's generator seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Homogenised tensor and corrector diagnostics (ahom.json)
    Ahom,
    /// Discrete Poincaré constants over a κ-grid (poincare.csv)
    Poincare,
    /// Fibre expansion sweep over (ε, θ) (sweep.csv, sweep_summary.json)
    Sweep,
    /// Whole-space comparison assembled from fibres (wholespace.csv)
    Wholespace,
    /// D and E corrector estimates (em_sweep.csv)
    EmSweep,
    /// Measure summary and gradient-mean check (measure_check.json)
    CheckMeasure,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let Some(scenario) = cli.scenario else {
        eprintln!("error: --scenario <file> is required");
        return ExitCode::from(2);
    };
    let cmd = match cli.cmd {
        Cmd::Ahom => Command::Ahom,
        Cmd::Poincare => Command::Poincare,
        Cmd::Sweep => Command::Sweep,
        Cmd::Wholespace => Command::Wholespace,
        Cmd::EmSweep => Command::EmSweep,
        Cmd::CheckMeasure => Command::CheckMeasure,
    };
    let opts = RunOptions { scenario, out: cli.out, workers: cli.workers, cache: cli.cache, seed: cli.seed };
    match run(cmd, &opts) {
        Ok(o) => {
            for f in &o.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
