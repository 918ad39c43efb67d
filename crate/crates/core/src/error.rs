use thiserror::Error;

use crate::penalized_ls::SelectorOutcome;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate column {column}: {reason}")]
    DegenerateColumn { column: usize, reason: &'static str },

    #[error("invalid grouping factor: {0}")]
    Grouping(String),

    #[error("numeric failure: {message} (condition estimate {condition:.3e})")]
    Numeric { message: String, condition: f64 },

    #[error("coordinate descent did not converge after {passes} passes (max change {max_change:.3e})")]
    NonConvergence {
        passes: usize,
        max_change: f64,
        last: Box<SelectorOutcome>,
    },

    #[error("too many fixed effects selected: |J| = {size} exceeds cap {cap}")]
    SupportCap { size: usize, cap: usize },

    #[error("restricted design is rank deficient: {0}")]
    Rank(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("tuning failed: {0}")]
    Tuning(String),

    #[error("selector '{name}' failed: {message}")]
    Selector { name: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn numeric(message: impl Into<String>, condition: f64) -> Self {
        Error::Numeric {
            message: message.into(),
            condition,
        }
    }

    /// Short machine-readable tag used in CLI error payloads.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::DegenerateColumn { .. } => "degenerate_column",
            Error::Grouping(_) => "grouping",
            Error::Numeric { .. } => "numeric",
            Error::NonConvergence { .. } => "non_convergence",
            Error::SupportCap { .. } => "support_cap",
            Error::Rank(_) => "rank",
            Error::Config(_) => "config",
            Error::Tuning(_) => "tuning",
            Error::Selector { .. } => "selector",
            Error::Data(_) => "data",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
