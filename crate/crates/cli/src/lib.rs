//! Experiment runner behind the `tangent-kernels` binary.
//!
//! Each subcommand reads an architecture (JSON), one or two datasets, and
//! writes CSV tables plus gnuplot scripts into `--out`.

mod commands;
mod config;
pub mod data;
mod error;
mod output;

use std::path::PathBuf;

pub use commands::{cmd_dynamics, cmd_ensemble, cmd_infer, cmd_kernel, cmd_mc, cmd_taylor};
pub use config::{Cli, Command, Options};
pub use error::{CliError, Result};

/// Runs one command and reports the files it wrote on stdout.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let opts = cli.command.options().resolve()?;
    let files = match cli.command {
        Command::Kernel(_) => cmd_kernel(&opts)?,
        Command::Infer(_) => cmd_infer(&opts)?,
        Command::Dynamics(_) => cmd_dynamics(&opts)?,
        Command::Mc(_) => cmd_mc(&opts)?,
        Command::Ensemble(_) => cmd_ensemble(&opts)?,
        Command::Taylor(_) => cmd_taylor(&opts)?,
    };
    for f in &files {
        println!("{}", f.display());
    }
    Ok(files)
}
