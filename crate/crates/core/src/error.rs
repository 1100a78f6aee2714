use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible set: {0}")]
    InfeasibleSet(String),

    #[error("numeric failure in {context} after {iterations} iterations")]
    Numeric { context: String, iterations: usize },

    #[error("power flow diverged after {iterations} iterations (max mismatch {mismatch:.3e} p.u.)")]
    PowerFlowDivergence { iterations: usize, mismatch: f64 },

    #[error("step {step} aborted: {source}")]
    StepAborted {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("did not converge within {iterations} iterations (last change {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("internal consistency: {0}")]
    Internal(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), message: message.into() }
    }
}
