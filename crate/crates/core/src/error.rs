use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure classes. The CLI maps each to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
    NonConvergence,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("fixed-point iteration diverged after {} steps (last residual {:e})", trace.len(), trace.last().copied().unwrap_or(f64::NAN))]
    Diverged { trace: Vec<f64> },

    #[error("kernel recursion did not converge in {max_steps} steps (last max-entry change {:e})", trace.last().copied().unwrap_or(f64::NAN))]
    KernelNotConverged { max_steps: usize, trace: Vec<f64> },

    #[error("{failed} of {total} simulated networks failed to reach their fixed point")]
    TooManyFailures { failed: usize, total: usize },

    #[error("matrix is not positive definite at jitter {last_jitter:e} (lambda_min estimate {lambda_min_estimate:e})")]
    NotPositiveDefinite {
        lambda_min_estimate: f64,
        last_jitter: f64,
    },

    #[error("{}: {message} (byte offset {offset})", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{}: row {row}, column {column}: {message}", path.display())]
    Csv {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Format { .. } | Error::Csv { .. } | Error::Io(_) => ErrorCategory::Data,
            Error::Diverged { .. }
            | Error::KernelNotConverged { .. }
            | Error::TooManyFailures { .. } => ErrorCategory::NonConvergence,
            Error::Domain(_)
            | Error::Precondition(_)
            | Error::Unsupported(_)
            | Error::NotPositiveDefinite { .. } => ErrorCategory::Numerical,
        }
    }
}
