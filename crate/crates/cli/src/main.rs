//! `qnspec`: simulate, plan, reconstruct and check noise-spectroscopy runs.

mod config;
mod error;
mod output;
mod run;
mod units;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{FileConfig, Mode, Overrides};
use error::{CheckFailed, ConfigError};
use run::Target;

#[derive(Parser)]
#[command(name = "qnspec", version, about = "Qubit noise spectroscopy workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Configuration file (TOML, or JSON by extension).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Built-in scenario used when no config file is given.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
}

#[derive(Subcommand)]
enum Command {
    /// Expectation values of every separated window experiment.
    Simulate,
    /// Spectrum estimates per region and stitched, with plots.
    Reconstruct {
        #[arg(long, value_enum, default_value = "both")]
        target: Target,
        /// Stitched c estimate CSV, required for `--target q`.
        #[arg(long, value_name = "PATH")]
        c_estimate: Option<PathBuf>,
    },
    /// Physicality and consistency checks.
    Check {
        #[arg(long, value_name = "PATH")]
        c_estimate: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        q_estimate: Option<PathBuf>,
    },
    /// Sampling plans of every region.
    Plan,
    /// Filter functions of every region.
    Filters,
}

fn load(common: &Common) -> Result<config::Workbench, ConfigError> {
    let file = match (&common.config, &common.preset) {
        (Some(_), Some(_)) => return Err(ConfigError::new("", "give either --config or --preset")),
        (Some(path), None) => config::read_file(path)?,
        (None, Some(name)) => FileConfig {
            preset: Some(name.clone()),
            ..Default::default()
        },
        (None, None) => {
            return Err(ConfigError::new(
                "",
                "no configuration: pass --config PATH or --preset paper-sec5",
            ))
        }
    };
    let over = Overrides {
        seed: common.seed,
        mode: common.mode,
        out: common.out.clone(),
    };
    config::ingest(file, &over)
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let wb = load(&cli.common)?;
    match &cli.command {
        Command::Simulate => {
            let path = run::simulate(&wb)?;
            println!("wrote {}", path.display());
        }
        Command::Reconstruct { target, c_estimate } => {
            run::reconstruct(&wb, *target, c_estimate.as_deref())?
        }
        Command::Check {
            c_estimate,
            q_estimate,
        } => run::check(&wb, c_estimate.as_deref(), q_estimate.as_deref())?,
        Command::Plan => run::plan(&wb)?,
        Command::Filters => run::filters(&wb)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(ce) = e.downcast_ref::<ConfigError>() {
                eprintln!("config error: {ce}");
                ExitCode::from(2)
            } else if let Some(cf) = e.downcast_ref::<CheckFailed>() {
                eprintln!("{cf}");
                ExitCode::from(3)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        }
    }
}
