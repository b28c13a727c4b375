//! `cvdiff`: thermodynamic integration, sampling, transition benchmarks and
//! rejection statistics for the dimer-in-solvent system.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use error::CliError;
use output::Output;

#[derive(Parser)]
#[command(name = "cvdiff", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Thermodynamic integration: writes mean_force.csv, free_energy.csv and
    /// ti_levels.csv.
    Ti(Common),
    /// One chain: writes trajectory.csv and diagnostics.csv (plus
    /// free_energy_snapshots.csv for adaptive MALA).
    Sample(Common),
    /// Transition-time sweep over (alpha beta h, dt): writes sweep.csv.
    Bench(Common),
    /// One-step RMHMC rejection statistics: writes rejections.csv.
    Reject(Common),
}

#[derive(Args)]
struct Common {
    /// TOML file overriding the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "paper-dimer")]
    preset: String,
    /// `section.key=value` override, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Mean-force CSV from `cvdiff ti`.
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// mala, adaptive-mala, rmhmc or rmghmc.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long, conflicts_with = "alpha_beta_h")]
    alpha: Option<f64>,
    #[arg(long)]
    alpha_beta_h: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Rows are written every `stride` iterations.
    #[arg(long)]
    stride: Option<u64>,
    /// Transitions per benchmark cell.
    #[arg(long)]
    k: Option<usize>,
    /// Trials per rejection cell.
    #[arg(long)]
    trials: Option<u64>,
    /// Learn the profiles on the fly (MALA only).
    #[arg(long)]
    adaptive: bool,
    /// Stop adaptive learning after this many steps.
    #[arg(long)]
    freeze_after: Option<u64>,
    /// Worker threads for sweeps (all cores by default).
    #[arg(long)]
    threads: Option<usize>,
    /// Desk-scale run: shorter TI, K = 2000, 10^5 rejection trials.
    #[arg(long)]
    quick: bool,
}

impl Common {
    fn resolve(&self, command: &str) -> Result<RunConfig, CliError> {
        let mut c = RunConfig::load(&self.preset, self.config.as_deref(), &self.sets)?;
        if self.quick {
            c.ti.dt = 1e-4;
            c.ti.time_per_level = 25.0;
            c.bench.k = 2000;
            c.reject.trials = 100_000;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.out {
            c.io.out_dir = v.clone();
        }
        if let Some(v) = &self.profiles {
            c.io.profiles = Some(v.clone());
        }
        if let Some(v) = &self.scheme {
            c.sampler.scheme = v.clone();
        }
        if let Some(v) = self.alpha {
            c.sampler.alpha = Some(v);
            c.sampler.alpha_beta_h = None;
        }
        if let Some(v) = self.alpha_beta_h {
            c.sampler.alpha_beta_h = Some(v);
            c.sampler.alpha = None;
        }
        if let Some(v) = self.dt {
            c.sampler.dt = v;
        }
        if let Some(v) = self.steps {
            c.sampler.steps = v;
        }
        if let Some(v) = self.stride {
            c.sampler.stride = v;
        }
        if let Some(v) = self.k {
            c.bench.k = v;
        }
        if let Some(v) = self.trials {
            c.reject.trials = v;
        }
        if let Some(v) = self.freeze_after {
            c.adaptive.freeze_after = Some(v);
        }
        if self.adaptive {
            match c.sampler.scheme.as_str() {
                "mala" | "adaptive-mala" => c.sampler.scheme = "adaptive-mala".into(),
                other => {
                    return Err(CliError::Config(format!(
                        "--adaptive is only available for MALA, not {other}"
                    )))
                }
            }
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        c.validate()?;
        if command == "ti" {
            c.ti_config(0)?;
        }
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, common) = match &cli.command {
        Command::Ti(c) => ("ti", c),
        Command::Sample(c) => ("sample", c),
        Command::Bench(c) => ("bench", c),
        Command::Reject(c) => ("reject", c),
    };
    let config = common.resolve(name)?;
    let out = Output::new(&config.io.out_dir, name, &config.hash()?, config.seed)?;
    match cli.command {
        Command::Ti(_) => commands::ti(&config, &out),
        Command::Sample(_) => commands::sample(&config, &out),
        Command::Bench(c) => commands::bench(&config, &out, c.threads),
        Command::Reject(_) => commands::reject(&config, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cvdiff: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
