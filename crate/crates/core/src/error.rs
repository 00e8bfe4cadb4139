use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the estimation pipeline and its I/O layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("predictive density f_{{i-1}}(Y_i) is zero at observation {index}; the mixing density has collapsed numerically")]
    PredictiveDensityZero { index: usize },

    #[error("H0 marginal likelihood underflowed at every grid node; use a finer grid")]
    H0Underflow,

    #[error("no interior maximum: curvature {curvature} is not positive")]
    NoInteriorMaximum { curvature: f64 },

    #[error("non-finite function value at {at}")]
    NonFinite { at: f64 },

    #[error("no modes above threshold")]
    NoModes,

    #[error("rejection sampler acceptance rate {rate:.2e} is below 1e-3")]
    RejectionRate { rate: f64 },

    #[error("masses sum to {sum}, expected 1")]
    MassNotNormalized { sum: f64 },

    #[error("{0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{0}")]
    Data(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::LengthMismatch { .. }
            | Error::Io { .. }
            | Error::Parse { .. }
            | Error::Data(_)
            | Error::MassNotNormalized { .. } => 2,
            Error::PredictiveDensityZero { .. }
            | Error::H0Underflow
            | Error::NoInteriorMaximum { .. }
            | Error::NonFinite { .. }
            | Error::NoModes
            | Error::RejectionRate { .. }
            | Error::Numerical(_) => 3,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
