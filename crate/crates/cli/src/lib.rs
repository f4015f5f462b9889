//! The `ehr` command line: ingestion, the five workflows and their JSON/CSV
//! reports. [`run`] is the whole program minus process exit, so tests can
//! drive it in-process.

pub mod args;
mod commands;
pub mod ingest;
pub mod json;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::Parser;

use ehr_core::EhrError;

pub use args::{Cli, Command};

/// Success.
pub const EXIT_OK: i32 = 0;
/// Bad arguments or unreadable/invalid input.
pub const EXIT_INPUT: i32 = 1;
/// A fit or a numerical routine failed.
pub const EXIT_NUMERICAL: i32 = 2;

/// Two-sided 5% critical value of the standard normal.
pub const Z_CRIT: f64 = 1.959963984540054;

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Input(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => EXIT_INPUT,
            Self::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Self::Input(m) | Self::Numerical(m) => m,
        }
    }
}

impl From<EhrError> for CliError {
    fn from(e: EhrError) -> Self {
        match e {
            EhrError::InvalidArgument(_) | EhrError::InvalidData(_) | EhrError::Dimension(_) => {
                Self::Input(e.to_string())
            }
            _ => Self::Numerical(e.to_string()),
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Reports go to `--out` or `stdout`; diagnostics go to `stderr`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let shown = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{shown}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{shown}");
                    EXIT_INPUT
                }
            };
        }
    };
    match execute(&cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message());
            e.exit_code()
        }
    }
}

/// One finished output: a file, or standard output when `path` is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Emit {
    pub path: Option<PathBuf>,
    pub text: String,
}

fn execute(command: &Command, stdout: &mut dyn Write) -> Result<(), CliError> {
    let emits = match command.output().threads {
        Some(0) => return Err(CliError::Input("--threads must be at least 1".into())),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| CliError::Input(format!("cannot start {t} threads: {e}")))?
            .install(|| commands::dispatch(command))?,
        None => commands::dispatch(command)?,
    };
    for emit in emits {
        match &emit.path {
            Some(path) => std::fs::write(path, &emit.text)
                .map_err(|e| CliError::Input(format!("cannot write '{}': {e}", path.display())))?,
            None => stdout
                .write_all(emit.text.as_bytes())
                .map_err(|e| CliError::Input(format!("cannot write to standard output: {e}")))?,
        }
    }
    Ok(())
}
