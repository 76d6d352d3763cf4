//! `efv` command implementations.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use efv_core::Error;
use serde::Serialize;

pub mod args;
pub mod commands;
pub mod dataset;
pub mod manifest;
pub mod plot;

/// A failed command: the underlying error and, when known, the file it concerns.
#[derive(Debug)]
pub struct Failure {
    pub error: Error,
    pub file: Option<PathBuf>,
}

pub type CliResult<T> = std::result::Result<T, Failure>;

impl Failure {
    pub fn at(path: &Path, error: Error) -> Self {
        Self {
            error,
            file: Some(path.to_path_buf()),
        }
    }

    /// One-line JSON description for stderr.
    pub fn json_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a str,
            message: String,
            #[serde(skip_serializing_if = "Option::is_none")]
            file: Option<String>,
        }
        serde_json::to_string(&Line {
            error: self.error.kind(),
            message: self.error.to_string(),
            file: self.file.as_ref().map(|p| p.display().to_string()),
        })
        .expect("error line serializes")
    }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Self { error, file: None }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.file {
            Some(p) => write!(f, "{}: {}", p.display(), self.error),
            None => write!(f, "{}", self.error),
        }
    }
}

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    /// A numerical check ran but exceeded its tolerance.
    ToleranceExceeded,
}

pub const EXIT_TOLERANCE: u8 = 1;
pub const EXIT_INPUT: u8 = 2;

impl Status {
    pub fn exit_code(self) -> ExitCode {
        match self {
            Status::Success => ExitCode::SUCCESS,
            Status::ToleranceExceeded => ExitCode::from(EXIT_TOLERANCE),
        }
    }
}

pub fn run(cli: args::Cli) -> CliResult<Status> {
    use args::Command::*;
    match cli.command {
        Convert(a) => commands::convert(&a),
        Preprocess(a) => commands::preprocess(&a),
        Train(a) => commands::train(&a),
        Eval(a) => commands::eval(&a),
        Gradcheck(a) => commands::gradcheck(&a),
        Plot(a) => commands::plot(&a),
        Synth(a) => commands::synth(&a),
    }
}
