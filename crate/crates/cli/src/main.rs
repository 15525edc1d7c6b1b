mod args;
mod commands;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use args::Cli;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] hyperrag_core::Error),
    #[error("cannot parse config {path}: {detail}")]
    ConfigFile { path: String, detail: String },
    #[error("missing artifact {path}; run `{hint}` first")]
    MissingArtifact { path: String, hint: &'static str },
    #[error("{0} conformance case(s) failed")]
    ConformanceFailed(usize),
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::ConfigFile { .. } => "configuration",
            CliError::MissingArtifact { .. } => "missing_artifact",
            CliError::ConformanceFailed(_) => "conformance_failure",
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let record = json!({ "error": "usage", "message": e.render().to_string().trim_end() });
            let _ = writeln!(std::io::stderr(), "{record}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = json!({ "error": e.category(), "message": e.to_string() });
            let _ = writeln!(std::io::stderr(), "{record}");
            ExitCode::FAILURE
        }
    }
}
