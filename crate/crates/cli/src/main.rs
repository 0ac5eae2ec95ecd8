//! `convgp`: compute, cache and evaluate NNGP kernels of convolutional
//! networks with correlated weight priors.
//!
//! ```text
//! convgp kernel    --arch cnngp-7 --data cifar-10-batches-bin --n 40 --lengthscale 17
//! convgp sweep     --arch cnngp-7 --data cifar-10-batches-bin --n 40 --lengthscale 1e-3,17,1e5 --out results.csv
//! convgp mc-verify --arch toy-1d --channels 256 --samples 100000
//! convgp predict   --kernel kernels/cnngp-7-n40-s0-l17.ckrn --labels kernels/cnngp-7-n40-s0.labels
//! ```
//!
//! Exit status is 0 on success, 1 for bad configuration, 2 for I/O failures
//! and 3 when `mc-verify` finds an entry outside its band.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Options;

#[derive(Parser, Debug)]
#[command(name = "convgp", version, about = "NNGP kernels for CNNs with correlated weight priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute one kernel per lengthscale and store it in the cache directory.
    Kernel(Options),
    /// Cross-validate a GP classifier over lengthscales and noise levels.
    Sweep(Options),
    /// Compare sampled finite networks against the analytic kernel.
    McVerify(Options),
    /// Predict classes from a stored kernel and a label file.
    Predict(Options),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Kernel(o) => commands::run(o, commands::kernel),
        Command::Sweep(o) => commands::run(o, commands::sweep),
        Command::McVerify(o) => commands::run(o, commands::mc_verify),
        Command::Predict(o) => commands::run(o, commands::predict),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) if f.is_broken_pipe() => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
