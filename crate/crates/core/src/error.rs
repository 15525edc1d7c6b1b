use thiserror::Error;

/// Every failure the library can report.
///
/// The variant doubles as the machine-readable category emitted by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid point: {0}")]
    InvalidPoint(String),

    #[error("optimizer diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("numerical failure: {detail} (residual {residual:.3e})")]
    Numerical { detail: String, residual: f64 },

    #[error("scorer failed on {id}: {detail}")]
    Scorer { id: String, detail: String },

    #[error("support too large for the exact solver ({size} > {limit}); use the entropic solver")]
    SupportTooLarge { size: usize, limit: usize },

    #[error("parse error in {source_name} line {line}: {detail}")]
    Parse {
        source_name: String,
        line: usize,
        detail: String,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn invalid_point(msg: impl Into<String>) -> Self {
        Error::InvalidPoint(msg.into())
    }

    pub fn divergence(step: usize, detail: impl Into<String>) -> Self {
        Error::Divergence {
            step,
            detail: detail.into(),
        }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn at_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Stable short name of the error kind, innermost stage wins.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract_violation",
            Error::InvalidPoint(_) => "invalid_point",
            Error::Divergence { .. } => "divergence",
            Error::Config(_) => "configuration",
            Error::Infeasible(_) => "infeasible",
            Error::Numerical { .. } => "numerical",
            Error::Scorer { .. } => "scorer",
            Error::SupportTooLarge { .. } => "support_too_large",
            Error::Parse { .. } => "parse",
            Error::Stage { source, .. } => source.category(),
            Error::Io(_) => "io",
            Error::Json(_) => "serialization",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
