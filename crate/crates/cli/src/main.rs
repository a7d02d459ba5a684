//! `sdcl`: runs continual-learning and segmentation experiments from JSON
//! configs, checks the SVD backward pass, and times the subspace loss.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sdcl_core::{bench, gradcheck};

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "sdcl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Class-incremental training over a task stream.
    TrainCl {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `cl.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Reuse a nonempty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Continual segmentation on synthetic shape scenes.
    TrainCss {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference check of the SVD backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, hide = true)]
        flip_term3: bool,
    },
    /// Timing of thin SVD plus its backward pass over a grid of row counts.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_DS)]
        ds: Vec<usize>,
        #[arg(long, default_value_t = bench::DEFAULT_P)]
        p: usize,
        #[arg(long, default_value_t = bench::DEFAULT_M)]
        m: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainCl { config, seed, force } => commands::train_cl(&config, seed, force),
        Command::TrainCss { config, seed, force } => commands::train_css(&config, seed, force),
        Command::Gradcheck {
            seed,
            instances,
            flip_term3,
        } => {
            if commands::gradcheck(seed, instances, flip_term3) {
                Ok(())
            } else {
                eprintln!("gradcheck: relative error above {:e}", gradcheck::TOLERANCE);
                return ExitCode::FAILURE;
            }
        }
        Command::Bench { ds, p, m, out } => commands::bench(&ds, p, m, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
