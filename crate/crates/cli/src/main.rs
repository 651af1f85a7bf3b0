//! `ntc`: train, sweep, diagnose and plot transform codes from TOML configs.

mod artifacts;
mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Options;

#[derive(Parser)]
#[command(name = "ntc", version, about = "Transform coding experiments on synthetic sources")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving every artifact of the run.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads for independent jobs.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Replaces every seed in the config.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Only parse and validate the config.
    #[arg(long, global = true)]
    check: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Entropy-constrained vector quantizer at one trade-off.
    TrainVecvq,
    /// Transform code at one trade-off.
    TrainNtc,
    /// One transform code conditioned on a range of trade-offs.
    TrainMultirate,
    /// Rate-distortion points for several methods and trade-offs.
    SweepRd,
    /// Quantizer extraction, oscillation counts and Jacobian scores.
    Diagnose,
    /// Compresses source samples with a trained model and checks the result.
    CodecCheck,
    /// Renders a CSV artifact as SVG.
    Plot,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let Some(config) = cli.config.as_deref() else {
        eprintln!("config error: --config is required");
        return ExitCode::from(2);
    };
    let o = Options {
        config,
        out_dir: &cli.out_dir,
        threads: cli.threads.max(1),
        seed_override: cli.seed_override,
        check: cli.check,
    };
    let result = match cli.command {
        Command::TrainVecvq => commands::train_vecvq_cmd(&o),
        Command::TrainNtc => commands::train_ntc_cmd(&o),
        Command::TrainMultirate => commands::train_multirate_cmd(&o),
        Command::SweepRd => commands::sweep_rd_cmd(&o),
        Command::Diagnose => commands::diagnose_cmd(&o),
        Command::CodecCheck => commands::codec_check_cmd(&o),
        Command::Plot => plot::plot_cmd(o.config, o.out_dir, o.check),
    };
    match result {
        Ok(()) => {
            log::info!("wrote {}", o.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
