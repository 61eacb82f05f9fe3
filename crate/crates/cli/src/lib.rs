//! Library side of the `groundnc` command: configuration, run records and
//! the command implementations, usable from tests without a subprocess.

pub mod commands;
pub mod config;
pub mod error;
pub mod record;
pub mod serve;

pub use commands::{execute, replay, CommandKind, NBestLine, Outcome, ReplayOutcome};
pub use config::{load_config, Config};
pub use error::{CliError, CliResult};
pub use record::{RunRecord, HOME_VAR, RECORD_FILE};
