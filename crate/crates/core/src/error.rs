use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the modeling, solver, and optimization layers.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("phase {value} rad at parameter index {index} lies inside the guard band around a multiple of pi")]
    GuardBandViolation { index: usize, value: f64 },

    #[error("index out of range: {what} = {index}, valid range {valid}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        valid: String,
    },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("system matrix is singular or too ill-conditioned (residual {residual:e})")]
    SingularSystem { residual: f64 },

    #[error("block {role} of layer pair {q} is singular (reciprocal condition {rcond:e})")]
    BlockSingular {
        q: usize,
        role: &'static str,
        rcond: f64,
    },

    #[error("unilateral solver requires W12 = 0, but channel {q} has norm {norm:e}")]
    UnilateralViolation { q: usize, norm: f64 },

    #[error("mutual-impedance quadrature did not converge (estimated error {error:e})")]
    IntegrationFailure { error: f64 },

    #[error("least-squares scaling is degenerate (denominator {denominator:e})")]
    DegenerateScaling { denominator: f64 },

    #[error("operation requires a diagonal phase-shifter load network")]
    NotDiagonalMode,

    #[error("operation requires the ideal unilateral model: {0}")]
    NotIdealMode(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("parse error in {file}: {message}")]
    Parse { file: PathBuf, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl SimError {
    pub(crate) fn dims(context: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        SimError::DimensionMismatch {
            context: context.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        SimError::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        SimError::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SimError>;
