//! `apdg`: condense, inspect and simulate a distributed MPC experiment.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use apdg_core::config::{FileConfig, WATERTANK_CFG};
use apdg_core::dmpc::{build_problem, DmpcConfig};
use apdg_core::netsim::Mode;
use clap::{Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "apdg", version, about = "Asynchronous push-sum dual gradient for distributed MPC")]
struct Cli {
    /// Experiment file (TOML or JSON); the bundled water-tank setup if omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Overrides the number of closed-loop steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(alias = "asynchronous")]
    Async,
    #[value(alias = "sync")]
    Synchronous,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Async => Mode::Async,
            ModeArg::Synchronous => Mode::Synchronous,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// DARE solution, condensed dimensions and convexity constants per subsystem.
    Condense,
    /// Terminal sets as halfspace lists.
    TerminalSet,
    /// One distributed solve, compared against the centralized optimum.
    SolveOnce {
        /// Plant state as `x1;x2;...` with comma-separated components; defaults to x0.
        #[arg(long)]
        state: Option<String>,
    },
    /// Receding-horizon simulation with figure data and a plot script.
    ClosedLoop,
    /// Linear-rate certificate for the configured step size.
    Certificate,
}

fn load(cli: &Cli) -> Result<DmpcConfig> {
    let file = match &cli.config {
        Some(path) => FileConfig::read(path)?,
        None => FileConfig::from_toml_str(WATERTANK_CFG)?,
    };
    let mut cfg = file.to_dmpc()?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = cli.mode {
        cfg.mode = mode.into();
    }
    if let Some(steps) = cli.steps {
        cfg.t_sim = steps;
    }
    Ok(cfg)
}

fn parse_state(text: &str, cfg: &DmpcConfig) -> Result<Vec<nalgebra::DVector<f64>>> {
    let parts: Vec<&str> = text.split(';').collect();
    if parts.len() != cfg.m() {
        bail!("--state needs {} subsystem states separated by ';', got {}", cfg.m(), parts.len());
    }
    parts
        .iter()
        .zip(&cfg.subsystems)
        .enumerate()
        .map(|(i, (p, sys))| {
            let v: Vec<f64> = p
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("--state: subsystem {} is not a number list", i + 1))?;
            if v.len() != sys.n() {
                bail!("--state: subsystem {} needs {} components", i + 1, sys.n());
            }
            Ok(nalgebra::DVector::from_vec(v))
        })
        .collect()
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load(cli)?;
    let problem = build_problem(&cfg)?;
    match &cli.command {
        Command::Condense => commands::condense(&cfg, &problem, cli.json),
        Command::TerminalSet => commands::terminal_set(&problem, cli.json),
        Command::SolveOnce { state } => {
            let x = match state {
                Some(s) => parse_state(s, &cfg)?,
                None => cfg.x0.clone(),
            };
            commands::solve_once(&cfg, &problem, &x, &cli.out_dir, cli.json)
        }
        Command::ClosedLoop => commands::closed_loop(&cfg, &problem, &cli.out_dir, cli.json),
        Command::Certificate => commands::certificate(&cfg, &problem, cli.json),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors are tagged with their variant so scripts can match on it
            match e.downcast_ref::<apdg_core::Error>() {
                Some(core) => {
                    let debug = format!("{core:?}");
                    let variant = debug.split(['(', ' ', '{']).next().unwrap_or_default();
                    eprintln!("error[{variant}]: {e:#}");
                }
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(2)
        }
    }
}
