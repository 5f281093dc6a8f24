//! Command-line harness for boundary-limit orbit recovery: simulation,
//! moment extraction, inversion and the scaling studies.

pub mod config;
pub mod error;
pub mod manifest;
pub mod planar;
pub mod spatial;
pub mod table;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

use crate::error::{CliError, CliResult};

/// Environment variable capping the worker thread count.
pub const THREADS_VAR: &str = "ORBIT_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Extract2d,
    Invert2d,
    Extract3d,
    Invert3d,
    StudyDelta,
    StudyNoise,
    SimulateMtd,
    MtdRecover,
}

#[derive(Debug, Parser)]
#[command(name = "orbit-recover", version, about = "Orbit recovery from rigid-motion data")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config entry, e.g. `--set polar.rings=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn dispatch(cmd: Command, config: &Path, overrides: &[String], out: &Path) -> CliResult<()> {
    match cmd {
        Command::Extract2d => planar::extract2d(config, overrides, out),
        Command::Invert2d => planar::invert2d(config, overrides, out),
        Command::Extract3d => spatial::extract3d(config, overrides, out),
        Command::Invert3d => spatial::invert3d(config, overrides, out),
        Command::StudyDelta => planar::study_delta(config, overrides, out),
        Command::StudyNoise => planar::study_noise(config, overrides, out),
        Command::SimulateMtd => planar::simulate_mtd(config, overrides, out),
        Command::MtdRecover => planar::mtd_recover(config, overrides, out),
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_VAR} must be a positive integer, got {raw:?}")))?;
    // a second build in the same process (tests) keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = configure_threads().and_then(|_| dispatch(cli.command, &cli.config, &cli.overrides, &cli.out));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("orbit-recover: {e}");
            e.exit_code()
        }
    }
}
