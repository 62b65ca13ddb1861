//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Lattice constructors need a minimum side length.
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    /// Weight matrices failed a structural check (diagonal, sign, finiteness).
    #[error("invalid spatial weights: {0}")]
    InvalidWeights(String),

    /// Inputs whose shapes do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The spatial filter I - sum(rho_l M_l) is singular or numerically
    /// ill-conditioned at the requested coefficients.
    #[error("singular spatial filter: {0}")]
    SingularFilter(String),

    /// A simulated log-squared outcome left the representable range.
    #[error("simulation diverged at unit {unit}, period {period}: |log y^2| > {limit}")]
    Divergence { unit: usize, period: usize, limit: f64 },

    /// log y^2 is undefined at exact zeros.
    #[error("zero outcome: log y^2 undefined at {count} cell(s), first at unit {unit}, time {time}")]
    ZeroOutcome { unit: usize, time: usize, count: usize },

    /// Too few usable instrument columns to identify the parameters.
    #[error("under-identified: {0}")]
    UnderIdentified(String),

    /// The moment weighting matrix could not be inverted even after ridging.
    #[error("moment weighting failed: {0}")]
    WeightingFailure(String),

    /// Optimizer hit the iteration cap before meeting the tolerances.
    /// Carries the best iterate found so callers can inspect it.
    #[error("solver did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        best: Vec<f64>,
    },

    /// Invalid estimator or simulation configuration.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed weight or data file.
    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, message: message.into() }
    }

    /// True for errors caused by data or configuration rather than numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidLattice(_)
                | Error::InvalidWeights(_)
                | Error::DimensionMismatch(_)
                | Error::ZeroOutcome { .. }
                | Error::InvalidConfig(_)
                | Error::Io { .. }
                | Error::Parse { .. }
        )
    }
}
