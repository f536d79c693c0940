//! `echolab`: run netlists, simulate the preset backscatter channel and
//! measure how a load capacitance moves the sensor resonance.
//!
//! Exit codes: 0 success, 2 input error, 3 computation error.

mod commands;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use echolab::units::parse_value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable or invalid input files.
    #[error("{0}")]
    Input(String),
    /// A simulation or estimator failed on valid input.
    #[error("{0}")]
    Compute(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Compute(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Svg,
    Both,
}

impl Format {
    pub fn csv(self) -> bool {
        self != Format::Svg
    }

    pub fn svg(self) -> bool {
        self != Format::Csv
    }
}

/// Engineering value with an optional SPICE suffix (`2.5n`, `1meg`).
fn eng(text: &str) -> Result<f64, String> {
    parse_value(text).map_err(|e| e.to_string())
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Preset name, or path to a `.preset` file. Directories listed in
    /// ECHOLAB_PRESET_PATH are searched for `*.preset` files first.
    #[arg(long, global = true, default_value = echolab::piezo::DEFAULT_PRESET)]
    pub preset: String,
    /// Load capacitance on the sensor node, farads.
    #[arg(long, global = true, value_parser = eng)]
    pub cl: Option<f64>,
    /// Frequency span `lo,hi`. Values below 100 are multiples of the nominal
    /// resonance, larger ones are hertz (suffixes allowed).
    #[arg(long, global = true)]
    pub span: Option<String>,
    /// Simulation time step, seconds.
    #[arg(long, global = true, value_parser = eng)]
    pub dt: Option<f64>,
    /// Sections of the air-gap ladder.
    #[arg(long, global = true)]
    pub segments: Option<usize>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Both)]
    pub format: Format,
    /// Reserved; every path is deterministic today.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Parser)]
#[command(
    name = "echolab",
    version,
    about = "Ultrasonic backscatter channel simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Transient run of a netlist, or of the preset channel when no netlist
    /// is given.
    Tran {
        netlist: Option<PathBuf>,
        /// `V(node)`, `I(element)` or a node name; repeatable. Defaults to
        /// every top-level node voltage.
        #[arg(long)]
        probe: Vec<String>,
        /// Run length for the preset channel, seconds.
        #[arg(long, value_parser = eng, default_value = "1m")]
        stop: f64,
    },
    /// One measurement method on the preset channel.
    Measure {
        #[arg(value_enum)]
        method: MeasureMethod,
        /// Bode grid points.
        #[arg(long, default_value_t = 201)]
        points: usize,
        /// PLL iterations.
        #[arg(long, default_value_t = 30)]
        iterations: usize,
    },
    /// Resonance shift against load for several methods.
    Sweep {
        /// Comma-separated loads in farads; must include 0.
        #[arg(long, default_value = "0,0.25n,0.5n,1n,2n,2.5n,5n,10n")]
        loads: String,
        /// Comma-separated methods from ac, ringdown, chirp, bode, pll.
        #[arg(long, default_value = "ac,ringdown,chirp,bode,pll")]
        methods: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MeasureMethod {
    Ringdown,
    Chirp,
    Bode,
    Pll,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Tran {
            netlist,
            probe,
            stop,
        } => commands::tran(&cli.common, netlist.as_deref(), &probe, stop),
        Command::Measure {
            method,
            points,
            iterations,
        } => commands::measure(&cli.common, method, points, iterations),
        Command::Sweep { loads, methods } => commands::sweep(&cli.common, &loads, &methods),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
