//! `isdet`: shape traces, gradient checks, cost profiles, scaling sweeps and
//! toy training for the instance-specific detector modules.

mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{CommandName, Overrides, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(
    name = "isdet",
    version,
    about = "Instance-specific detector modules: shapes, gradients, costs, training"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print every intermediate shape of a module's forward pass.
    Shapes(CmdArgs),
    /// Compare autodiff gradients with central differences on a miniature module.
    Gradcheck(CmdArgs),
    /// Per-layer parameter and FLOP counts.
    Profile(CmdArgs),
    /// Cost deltas of the instance-specific variant over its baseline.
    Compare(CmdArgs),
    /// FLOPs over a doubling ladder of input sizes, with the fitted growth exponent.
    Sweep(CmdArgs),
    /// Train the toy detectors on synthetic data and report the loss curve.
    TrainToy(CmdArgs),
}

#[derive(clap::Args)]
struct CmdArgs {
    /// TOML file of settings; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let (command, args) = match cli.command {
        Cmd::Shapes(a) => (CommandName::Shapes, a),
        Cmd::Gradcheck(a) => (CommandName::Gradcheck, a),
        Cmd::Profile(a) => (CommandName::Profile, a),
        Cmd::Compare(a) => (CommandName::Compare, a),
        Cmd::Sweep(a) => (CommandName::Sweep, a),
        Cmd::TrainToy(a) => (CommandName::TrainToy, a),
    };
    let file = args.config.as_deref().map(Overrides::from_file).transpose()?;
    let cfg = RunConfig::resolve(command, file, args.overrides)?;
    let report = commands::run(&cfg)?;
    let text = report.render(cfg.format);
    match &cfg.out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::Failure(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{text}"),
    }
    Ok(report.pass)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
