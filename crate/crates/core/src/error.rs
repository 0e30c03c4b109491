use thiserror::Error;

use crate::baseline::StepHazard;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed something outside the operation's contract.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The frailty transform is not defined at the requested (gamma, t).
    #[error("domain violation: {family} transform undefined at gamma = {gamma}, t = {t}")]
    Domain { family: String, gamma: f64, t: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// The baseline fixed point did not stabilise. Carries the last iterate.
    #[error("baseline solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        last: Box<StepHazard>,
    },

    /// theta is outside the region where the likelihood is defined.
    #[error("invalid theta: {0}")]
    InvalidTheta(String),

    #[error("unfittable data: every profile likelihood evaluation was -inf")]
    Unfittable,

    #[error("bootstrap unstable: {failed} of {total} replicates failed")]
    BootstrapUnstable { failed: usize, total: usize },

    #[error("too few usable replicates: have {have}, need {need}")]
    TooFewReplicates { have: usize, need: usize },

    #[error("degenerate replicates: {0}")]
    Degenerate(String),

    #[error("subset selects no subjects")]
    EmptySubset,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
