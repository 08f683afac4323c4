//! Command-line front end: configuration, argument parsing and dispatch.

pub mod args;
pub mod config;
pub mod run;

pub use args::{Cli, Overrides};
pub use config::{Bandwidth, Command, Format, NuisanceKind, RunConfig};
pub use run::{run, RunOutcome};

use contiv::Error;
use serde_json::json;

/// Exit status for a failed run.
pub const EXIT_FAILURE: i32 = 1;

/// Structured error report written to stderr.
pub fn error_report(e: &Error) -> String {
    json!({ "error": { "code": e.code(), "message": e.to_string() } }).to_string()
}
