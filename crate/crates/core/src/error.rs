//! Error type shared by every estimator, smoother and CLI path.

use serde::Serialize;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {what} at row {row}, column {col}")]
    NonFinite { what: String, row: usize, col: usize },

    /// Rank failure of a Gram or moment matrix. `spectrum` is sorted descending;
    /// `eigenvector` spans the offending direction when it is known.
    #[error("identification failure: {message}")]
    Identification {
        message: String,
        spectrum: Vec<f64>,
        eigenvector: Option<Vec<f64>>,
    },

    #[error("evaluation point {point:?} was not seen when fitting cell means")]
    UnseenPoint { point: Vec<f64> },

    #[error("{distinct} distinct Z rows exceed the cell cap of {cap}; use a kernel or spline smoother")]
    CapExceeded { distinct: usize, cap: usize },

    #[error("all kernel weights underflow at point {point:?} with bandwidth {bandwidth:?}")]
    KernelUnderflow {
        point: Vec<f64>,
        bandwidth: Vec<f64>,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            got,
        }
    }

    /// Process exit status used by the CLI: 1 usage/IO, 2 identification, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Identification { .. } => 2,
            Error::Numeric(_) | Error::KernelUnderflow { .. } => 3,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::NonFinite { .. } => "non_finite",
            Error::Identification { .. } => "identification",
            Error::UnseenPoint { .. } => "unseen_point",
            Error::CapExceeded { .. } => "cap_exceeded",
            Error::KernelUnderflow { .. } => "kernel_underflow",
            Error::Invalid(_) => "invalid",
            Error::Numeric(_) => "numeric",
            Error::Io { .. } => "io",
            Error::Parse(_) => "parse",
        }
    }

    pub fn payload(&self) -> ErrorPayload {
        let (spectrum, eigenvector) = match self {
            Error::Identification {
                spectrum,
                eigenvector,
                ..
            } => (Some(spectrum.clone()), eigenvector.clone()),
            _ => (None, None),
        };
        ErrorPayload {
            error: self.kind(),
            message: self.to_string(),
            exit_code: self.exit_code(),
            spectrum,
            eigenvector,
        }
    }
}

/// Machine-readable error body written to stderr by the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorPayload {
    pub error: &'static str,
    pub message: String,
    pub exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eigenvector: Option<Vec<f64>>,
}
