mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, UsageError};

/// Experiments and verification suites for the critical fractional
/// Keller-Segel equation.
#[derive(Debug, Parser)]
#[command(name = "fracks", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Values given here replace those from `--config`.
#[derive(Debug, Args)]
struct Overrides {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    d: Option<usize>,
    #[arg(long, global = true)]
    s: Option<f64>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Number of radial cells.
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    r_max: Option<f64>,
    #[arg(long, global = true)]
    cfl: Option<f64>,
    #[arg(long, global = true)]
    t_end: Option<f64>,
    #[arg(long, global = true)]
    blowup_factor: Option<f64>,
    #[arg(long, global = true)]
    output_every: Option<usize>,
    /// first_order | muscl | primitive
    #[arg(long, global = true)]
    reconstruction: Option<String>,
    /// Directory for cached kernel matrices.
    #[arg(long, global = true)]
    kernel_cache: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed-form constants, plus measured ones for a supplied profile.
    Constants {
        /// Profile CSV (`r_center,volume,value`) to measure C* on.
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// One run from a multiple of the Euler-Lagrange profile.
    Simulate {
        #[arg(long)]
        mass_ratio: Option<f64>,
        #[arg(long)]
        t_end_tau: Option<f64>,
    },
    /// Sub- and supercritical runs around the critical mass.
    Dichotomy {
        /// Comma-separated mass ratios; an empty string gives an empty table.
        #[arg(long)]
        ratios: Option<String>,
        /// Use this profile instead of computing one.
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// Euler-Lagrange profile and, optionally, the VHLS ascent.
    Extremal {
        #[arg(long)]
        n_starts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Property suites; exit code 2 when any check fails.
    Verify {
        /// Replace every tolerance with this value.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Break the kernel symmetry before running the checks.
        #[arg(long)]
        corrupt_kernel: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// L1 distances between runs with decreasing regularisation.
    EpsStudy {
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f64>>,
        #[arg(long)]
        t_fix_tau: Option<f64>,
    },
}

fn resolve(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let o = &cli.overrides;
    let mut cfg = match &o.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = &o.out {
        cfg.output.directory = v.clone();
    }
    if let Some(v) = o.d {
        cfg.model.d = v;
    }
    if o.s.is_some() {
        cfg.model.s = o.s;
    }
    if let Some(v) = o.epsilon {
        cfg.model.epsilon = v;
    }
    if let Some(v) = o.n {
        cfg.grid.n = v;
    }
    if let Some(v) = o.r_max {
        cfg.grid.r_max = v;
    }
    if let Some(v) = o.cfl {
        cfg.solver.cfl = v;
    }
    if let Some(v) = o.t_end {
        cfg.solver.t_end = v;
        cfg.simulate.t_end_tau = None;
    }
    if let Some(v) = o.blowup_factor {
        cfg.solver.blowup_factor = v;
    }
    if let Some(v) = o.output_every {
        cfg.solver.output_every = v;
    }
    if let Some(v) = &o.reconstruction {
        cfg.solver.reconstruction = v.clone();
    }
    if let Some(v) = &o.kernel_cache {
        cfg.output.kernel_cache = Some(v.clone());
    }
    match &cli.command {
        Command::Constants { .. } => {
            if cfg.model.s.is_none() {
                return Err(config::usage(
                    "constants: missing model.s (pass --s or set it in the config)",
                ));
            }
        }
        Command::Simulate { mass_ratio, t_end_tau } => {
            if let Some(v) = mass_ratio {
                cfg.simulate.mass_ratio = *v;
            }
            if t_end_tau.is_some() {
                cfg.simulate.t_end_tau = *t_end_tau;
            }
        }
        Command::Dichotomy { ratios, .. } => {
            if let Some(v) = ratios {
                cfg.dichotomy.mass_ratios = parse_ratios(v)?;
            }
        }
        Command::Extremal { n_starts, seed } => {
            if let Some(v) = n_starts {
                cfg.extremal.n_starts = *v;
            }
            if let Some(v) = seed {
                cfg.extremal.seed = *v;
            }
        }
        Command::Verify { tolerance, seed, .. } => {
            if let Some(v) = tolerance {
                cfg.verify.tolerances.set_all(*v);
            }
            if let Some(v) = seed {
                cfg.verify.seed = *v;
            }
        }
        Command::EpsStudy { eps, t_fix_tau } => {
            if let Some(v) = eps {
                cfg.eps_study.eps_list = v.clone();
            }
            if let Some(v) = t_fix_tau {
                cfg.eps_study.t_fix_tau = *v;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_ratios(list: &str) -> anyhow::Result<Vec<f64>> {
    list.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| config::usage(format!("--ratios: '{t}': {e}")).into())
        })
        .collect()
}

/// Exit status: 0 success, 2 failed verification checks.
fn dispatch(cli: &Cli) -> anyhow::Result<u8> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Constants { profile } => commands::constants(&cfg, profile.as_deref()),
        Command::Simulate { .. } => commands::simulate(&cfg),
        Command::Dichotomy { profile, .. } => commands::dichotomy(&cfg, profile.as_deref()),
        Command::Extremal { .. } => commands::extremal(&cfg),
        Command::Verify { corrupt_kernel, .. } => commands::verify(&cfg, *corrupt_kernel),
        Command::EpsStudy { .. } => commands::eps_study(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
