//! `smpc-sim`: runs the stochastic MPC library from JSON run configurations.
//!
//! ```text
//! smpc-sim synth            config.json   # gain library JSON
//! smpc-sim simulate         config.json   # one trajectory CSV
//! smpc-sim montecarlo       config.json   # metrics JSON
//! smpc-sim check-properties config.json   # property report JSON
//! smpc-sim feasible-set     config.json   # boundary radii CSV
//! ```
//!
//! Errors go to stderr as one JSON line `{"error": {"kind", "message"}}`.

mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::Outcome;
pub use config::{FeasibleSetSpec, OutputSpec, RunConfig, OUTPUT_DIR_ENV, THREADS_ENV};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "smpc-sim", version, about = "Stochastic MPC with dynamic gain selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the gain library and write it as JSON.
    Synth { config: PathBuf },
    /// Simulate one closed-loop run and write its trace as CSV.
    Simulate { config: PathBuf },
    /// Run a Monte Carlo campaign and write the metrics as JSON.
    Montecarlo { config: PathBuf },
    /// Run the property suites and write the report as JSON.
    CheckProperties { config: PathBuf },
    /// Write feasible-set boundary radii per direction as CSV.
    FeasibleSet { config: PathBuf },
}

impl Command {
    fn config(&self) -> &PathBuf {
        match self {
            Command::Synth { config }
            | Command::Simulate { config }
            | Command::Montecarlo { config }
            | Command::CheckProperties { config }
            | Command::FeasibleSet { config } => config,
        }
    }
}

/// Validates the config and runs one command, honouring `SMPC_THREADS`.
pub fn execute(command: &Command) -> CliResult<Outcome> {
    let threads = config::thread_override()?;
    let ctx = commands::Context::load(command.config())?;
    let run = || match command {
        Command::Synth { .. } => commands::synth(&ctx),
        Command::Simulate { .. } => commands::simulate(&ctx),
        Command::Montecarlo { .. } => commands::montecarlo(&ctx),
        Command::CheckProperties { .. } => commands::check_properties(&ctx),
        Command::FeasibleSet { .. } => commands::feasible_set(&ctx),
    };
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {n} worker threads: {e}")))?
            .install(run),
        None => run(),
    }
}

/// Parses `argv`, runs the command and reports on stdout/stderr. Returns the
/// process exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim_end().to_string());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string(&outcome).expect("plain data serialises"));
            0
        }
        Err(err) => {
            eprintln!("{}", err.to_json());
            err.exit_code()
        }
    }
}
