//! Command line front end for heat source reconstruction experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ths_core::basis::BasisFamily;
use ths_core::experiment::{
    run_experiment, write_forward_data, write_mode_report, write_outputs, ExperimentConfig,
    RegularizerChoice,
};
use ths_core::Real;

/// Reconstructs volumetric heat sources from temperature and velocity data
/// governed by the 1D advection-diffusion equation.
#[derive(Parser)]
#[command(name = "ths", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full inversion experiment matrix described by a config file.
    Run {
        /// Experiment config (sectioned key=value, see README).
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generate synthetic data only (reference solve plus noise injection).
    Forward {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Inspect the spectral basis and the truncation-order selection.
    Modes {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args)]
struct Overrides {
    /// Replace the seed list (repeatable).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory (default: config value, then $THS_OUT_DIR, then ./out).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Basis family: fourier or branch.
    #[arg(long)]
    basis: Option<String>,
    /// Replace the regularizer list (repeatable): none, tsvd, tikhonov.
    #[arg(long = "regularizer")]
    regularizers: Vec<String>,
    /// Worker pool size for the run matrix.
    #[arg(long)]
    jobs: Option<usize>,
}

fn apply_overrides(cfg: &mut ExperimentConfig<Real>, ov: &Overrides) -> Result<(), String> {
    if !ov.seeds.is_empty() {
        cfg.seeds = ov.seeds.clone();
    }
    if let Some(basis) = &ov.basis {
        cfg.basis = match basis.as_str() {
            "fourier" => BasisFamily::Fourier,
            "branch" => BasisFamily::Branch,
            other => return Err(format!("unknown basis {other:?}")),
        };
    }
    if !ov.regularizers.is_empty() {
        cfg.regularizers = ov
            .regularizers
            .iter()
            .map(|r| match r.as_str() {
                "none" => Ok(RegularizerChoice::None),
                "tsvd" => Ok(RegularizerChoice::Tsvd),
                "tikhonov" => Ok(RegularizerChoice::Tikhonov),
                other => Err(format!("unknown regularizer {other:?}")),
            })
            .collect::<Result<_, _>>()?;
    }
    if let Some(jobs) = ov.jobs {
        cfg.jobs = jobs;
    }
    if let Some(dir) = &ov.out_dir {
        cfg.out_dir = dir.clone();
    } else if cfg.out_dir == *"out" {
        if let Ok(env_dir) = std::env::var("THS_OUT_DIR") {
            cfg.out_dir = PathBuf::from(env_dir);
        }
    }
    cfg.validate().map_err(|e| e.to_string())
}

const EXIT_CONFIG_ERROR: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 1;

fn load(config: &PathBuf, ov: &Overrides) -> Result<ExperimentConfig<Real>, String> {
    let mut cfg = ExperimentConfig::parse_file(config).map_err(|e| e.to_string())?;
    apply_overrides(&mut cfg, ov)?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(EXIT_CONFIG_ERROR)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let tc = cfg.test_case().map_err(|e| e.to_string())?;
            let outcome = run_experiment(&cfg).map_err(|e| e.to_string())?;
            write_outputs(&outcome, &tc.grid, &cfg.out_dir).map_err(|e| e.to_string())?;
            println!(
                "{:>8} {:>12} {:>5} {:>6} {:>12} {:>7} {:>10}",
                "sigma", "regularizer", "runs", "failed", "j_min", "iters", "error_ths"
            );
            for row in &outcome.table {
                println!(
                    "{:>8.4} {:>12} {:>5} {:>6} {:>12.5} {:>7} {:>10}",
                    row.sigma,
                    row.regularizer,
                    row.runs,
                    row.failures,
                    row.j_min_median,
                    row.iterations_median,
                    row.error_ths_median
                        .map(|e| format!("{:.2}%", e * 100.0))
                        .unwrap_or_else(|| "n/a".into()),
                );
            }
            println!("reports written to {}", cfg.out_dir.display());
            if outcome.all_converged {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("warning: some runs did not satisfy the stopping rule");
                Ok(ExitCode::from(EXIT_NOT_CONVERGED))
            }
        }
        Command::Forward { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            write_forward_data(&cfg, &cfg.out_dir).map_err(|e| e.to_string())?;
            println!("synthetic data written to {}", cfg.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Modes { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let selections = write_mode_report(&cfg, &cfg.out_dir).map_err(|e| e.to_string())?;
            for (sigma, n) in selections {
                println!("sigma = {sigma}: {n} modes");
            }
            println!("basis report written to {}", cfg.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
