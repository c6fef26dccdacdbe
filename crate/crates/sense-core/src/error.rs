//! Error type shared across the crate.

use std::fmt;

use crate::dual::DualSolution;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, SenseError>;

#[derive(Debug)]
pub enum SenseError {
    /// Inputs whose dimensions do not match the configured arrays.
    Shape {
        context: &'static str,
        detail: String,
    },
    /// Invalid configuration value.
    Config(String),
    /// Fisher information matrix too ill-conditioned to invert.
    NonIdentifiable {
        min_eigenvalue: f64,
        condition: f64,
    },
    /// Iterative solver exhausted its iteration budget before reaching
    /// tolerance. Carries the best iterate found so callers can inspect or
    /// reuse it.
    NonConverged {
        iterations: usize,
        grad_norm: f64,
        stage: Option<usize>,
        best: Box<DualSolution>,
    },
    /// A linear system that should be solvable was numerically singular.
    Singular { context: &'static str },
    /// Too many Monte Carlo trials failed to trust the aggregate.
    FailureBudget {
        failures: usize,
        trials: usize,
        max_fraction: f64,
    },
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl SenseError {
    /// Whether the error is a per-trial numerical failure that a Monte
    /// Carlo aggregate may absorb within its failure budget, as opposed to
    /// a configuration or environment problem that must abort the run.
    pub fn is_trial_failure(&self) -> bool {
        matches!(
            self,
            SenseError::NonConverged { .. }
                | SenseError::NonIdentifiable { .. }
                | SenseError::Singular { .. }
        )
    }

    /// Tags a solver error with the sensing stage it occurred in.
    pub fn at_stage(self, stage_index: usize) -> Self {
        match self {
            SenseError::NonConverged {
                iterations,
                grad_norm,
                best,
                ..
            } => SenseError::NonConverged {
                iterations,
                grad_norm,
                stage: Some(stage_index),
                best,
            },
            other => other,
        }
    }
}

impl fmt::Display for SenseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SenseError::Shape { context, detail } => {
                write!(f, "dimension mismatch in {context}: {detail}")
            }
            SenseError::Config(msg) => write!(f, "invalid configuration: {msg}"),
            SenseError::NonIdentifiable {
                min_eigenvalue,
                condition,
            } => write!(
                f,
                "information matrix is not invertible to working precision \
                 (min eigenvalue {min_eigenvalue:.3e}, condition {condition:.3e})"
            ),
            SenseError::NonConverged {
                iterations,
                grad_norm,
                stage,
                ..
            } => {
                write!(
                    f,
                    "solver did not converge after {iterations} iterations \
                     (gradient norm {grad_norm:.3e}"
                )?;
                if let Some(k) = stage {
                    write!(f, ", stage {k}")?;
                }
                write!(f, ")")
            }
            SenseError::Singular { context } => {
                write!(f, "singular linear system in {context}")
            }
            SenseError::FailureBudget {
                failures,
                trials,
                max_fraction,
            } => write!(
                f,
                "{failures} of {trials} trials failed, exceeding the budget of \
                 {:.1}%",
                max_fraction * 100.0
            ),
            SenseError::Io(e) => write!(f, "io error: {e}"),
            SenseError::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for SenseError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            SenseError::Io(e) => Some(e),
            SenseError::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for SenseError {
    fn from(e: std::io::Error) -> Self {
        SenseError::Io(e)
    }
}

impl From<serde_json::Error> for SenseError {
    fn from(e: serde_json::Error) -> Self {
        SenseError::Json(e)
    }
}
