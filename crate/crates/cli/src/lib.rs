//! Command-line front end: argument parsing, config files, the command
//! bodies and line-delimited JSON reports.

pub mod commands;
pub mod options;
pub mod report;

use std::fmt;

/// Bad flags, missing arguments or unparseable config: exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A numerical check failed: exit code 4.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;

/// Maps an error chain onto the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use atc_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<NumericFailure>() {
            return EXIT_NUMERIC;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) => EXIT_USAGE,
                E::Shape { .. } | E::Index { .. } | E::Validation(_) | E::Codec { .. } | E::InsufficientData { .. } => {
                    EXIT_VALIDATION
                }
                E::Evaluation { .. } => EXIT_NUMERIC,
                E::Io(_) => EXIT_IO,
                E::Contract(_) => EXIT_INTERNAL,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_INTERNAL
}

/// Evaluation worker count from `ATC_THREADS`; `None` when unset.
pub fn threads_from_env() -> anyhow::Result<Option<usize>> {
    match std::env::var("ATC_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(UsageError(format!("ATC_THREADS must be a positive integer, got {v:?}")).into()),
        },
    }
}
