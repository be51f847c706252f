use std::fmt;

use siltwin_core::{ErrorClass, TrustError};

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_MODEL: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError { code: EXIT_USAGE, message: msg.into() }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        CliError { code: EXIT_INPUT, message: msg.into() }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError { code: EXIT_RUNTIME, message: msg.into() }
    }


    /// Maps an engine error, prefixing the pipeline stage it came from.
    pub fn from_trust(step: &str, e: TrustError) -> Self {
        let message = format!("{step}: stage `{}` failed: {e}", e.stage());
        let code = match e.class() {
            ErrorClass::Input => EXIT_INPUT,
            ErrorClass::Runtime => EXIT_RUNTIME,
            ErrorClass::Model => EXIT_MODEL,
        };
        CliError { code, message }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Lifts a core module error into a [`CliError`] through [`TrustError`].
pub trait Stage<T> {
    fn at(self, step: &str) -> CliResult<T>;
}

impl<T, E: Into<TrustError>> Stage<T> for Result<T, E> {
    fn at(self, step: &str) -> CliResult<T> {
        self.map_err(|e| CliError::from_trust(step, e.into()))
    }
}
