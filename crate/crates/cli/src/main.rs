//! `deltakit` command-line tool.

mod adapter;
mod metrics;
mod verify;

use std::fmt;
use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deltakit::io::CsvTable;

#[derive(Parser, Debug)]
#[command(name = "deltakit", version, about = "Build, inspect, merge and evaluate decomposed weight updates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create, inspect and apply adapter files.
    #[command(subcommand)]
    Adapter(adapter::AdapterCmd),
    /// Numerical self-checks of the adapter implementations.
    #[command(subcommand)]
    Verify(verify::VerifyCmd),
    /// Evaluation metrics over feature files and score tables.
    #[command(subcommand)]
    Metrics(metrics::MetricsCmd),
    /// Repeats per class so every class contributes about `target` images.
    Balance {
        /// Comma-separated class sizes.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<u64>,
        #[arg(long, default_value_t = deltakit::metrics::DEFAULT_BALANCE_TARGET)]
        target: u64,
    },
}

/// A failure with its exit code: 1 for invalid input, 2 for I/O.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<deltakit::Error> for CliError {
    fn from(e: deltakit::Error) -> Self {
        Self {
            code: if e.is_io() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

/// What a command reports back: success, or a check that ran but failed.
pub enum Outcome {
    Ok,
    CheckFailed,
}

/// Writes `table` to `out`, or to stdout when no path is given.
pub fn emit(table: &CsvTable, out: Option<&Path>) -> CliResult {
    match out {
        Some(path) => Ok(table.write(path)?),
        None => {
            print!("{}", table.render());
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<Outcome> {
    match cli.command {
        Command::Adapter(cmd) => adapter::run(cmd),
        Command::Verify(cmd) => verify::run(cmd),
        Command::Metrics(cmd) => metrics::run(cmd),
        Command::Balance { sizes, target } => {
            let repeats = deltakit::metrics::balance_repeats(&sizes, target)?;
            let line: Vec<String> = repeats.iter().map(u64::to_string).collect();
            println!("{}", line.join(","));
            Ok(Outcome::Ok)
        }
    }
}

fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(Outcome::Ok) => 0,
        Ok(Outcome::CheckFailed) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}
