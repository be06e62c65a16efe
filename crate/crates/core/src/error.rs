//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by every module of the audit pipeline.
#[derive(Debug, Error)]
pub enum AuditError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unsupported by this engine: {0}")]
    Capability(String),

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("target verified error {target} unreachable on grid: achieved range [{min}, {max}] for the {route} route")]
    Unreachable {
        target: f64,
        min: f64,
        max: f64,
        route: &'static str,
    },

    #[error("unknown unit test id `{0}`")]
    UnknownTest(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = AuditError> = std::result::Result<T, E>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(AuditError::Shape {
            context,
            expected,
            actual,
        })
    }
}

pub(crate) fn check_finite(context: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AuditError::NonFinite(context.to_string()))
    }
}
