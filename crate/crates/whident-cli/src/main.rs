//! Batch experiment runner for Wiener-Hammerstein channel identification.
//!
//! Subcommands: `design-pilot`, `identify`, `volterra`, `sweep`. Every run
//! is deterministic given the config file and the master seed; results are
//! CSV tables (plus optional gnuplot companion scripts via `--gnuplot`).
//!
//! Exit codes: 0 success, 2 usage error, 3 conditioning error, 4 I/O error.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "whident", version, about = "Wiener-Hammerstein channel identification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Master seed; overrides `experiment.master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel sweep points.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Also emit gnuplot companion scripts.
    #[arg(long)]
    gnuplot: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Design the three pilot sequences and write a design report.
    DesignPilot(CommonArgs),
    /// Run the three-step identification against the configured channel.
    Identify(CommonArgs),
    /// Run the reduced-kernel Volterra baseline.
    Volterra(CommonArgs),
    /// Sweep an axis (back-off, SNR, or pilot lengths) over Monte Carlo seeds.
    Sweep(CommonArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, run): (&CommonArgs, fn(&config::Config, &CommonArgs) -> commands::CmdResult) =
        match &cli.command {
            Command::DesignPilot(a) => (a, |c, a| {
                commands::design_pilot(c, &a.out, seed_of(c, a), a.gnuplot)
            }),
            Command::Identify(a) => (a, |c, a| {
                commands::identify(c, &a.out, seed_of(c, a), a.gnuplot)
            }),
            Command::Volterra(a) => (a, |c, a| {
                commands::volterra(c, &a.out, seed_of(c, a), a.gnuplot)
            }),
            Command::Sweep(a) => (a, |c, a| {
                commands::sweep(c, &a.out, seed_of(c, a), a.jobs, a.gnuplot)
            }),
        };

    let config = match config::Config::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(commands::exit_code_for(&e) as u8);
        }
    };
    match run(&config, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code_for(&e) as u8)
        }
    }
}

fn seed_of(config: &config::Config, args: &CommonArgs) -> u64 {
    args.seed.unwrap_or(config.experiment.master_seed)
}
