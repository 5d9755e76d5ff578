//! Crate-wide error type.

use std::fmt;

/// Errors produced by assembly, integration, solves and model reduction.
#[derive(Debug)]
pub enum Error {
    /// A vector or matrix did not have the expected dimension.
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    /// An implicit Euler step matrix could not be factorized.
    SingularStep { time_index: usize },
    /// A matrix passed to a direct factorization was singular.
    SingularMatrix { context: &'static str },
    /// The iterative solver did not reach the requested tolerance.
    SolverDidNotConverge {
        relative_residual: f64,
        iterations: usize,
    },
    /// A basis was used where G-orthonormal columns are required.
    BasisNotOrthonormal { context: &'static str },
    /// A reduced mass matrix `WᵀEV` was not invertible.
    BiorthogonalityViolated { which: &'static str },
    /// The N×N fully reduced system was singular (redundant columns in the
    /// final-time-adjoint basis); re-orthonormalize the basis.
    FullyReducedSingular,
    /// Power iteration failed to settle on an operator norm.
    PowerIterationStagnated { last_estimate: f64 },
    /// The control weight R(t) was not invertible.
    ControlWeightSingular,
    /// A benchmark configuration was rejected.
    InvalidConfig(String),
    /// A serialized artifact did not match the expected schema.
    Format(String),
    /// A model archive does not match the assembled system.
    FingerprintMismatch { expected: String, found: String },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch {
                context,
                expected,
                found,
            } => write!(f, "{context}: expected dimension {expected}, found {found}"),
            Error::SingularStep { time_index } => {
                write!(f, "singular implicit Euler step matrix at time index {time_index}")
            }
            Error::SingularMatrix { context } => write!(f, "singular matrix in {context}"),
            Error::SolverDidNotConverge {
                relative_residual,
                iterations,
            } => write!(
                f,
                "iterative solver stopped after {iterations} iterations at relative residual {relative_residual:.3e}"
            ),
            Error::BasisNotOrthonormal { context } => {
                write!(f, "{context}: basis is not orthonormal in the required inner product")
            }
            Error::BiorthogonalityViolated { which } => {
                write!(f, "reduced mass matrix for the {which} pair is not invertible")
            }
            Error::FullyReducedSingular => write!(
                f,
                "fully reduced normal equations are singular; re-orthonormalize the final-time-adjoint basis"
            ),
            Error::PowerIterationStagnated { last_estimate } => {
                write!(f, "power iteration stagnated, last Rayleigh quotient {last_estimate:.6e}")
            }
            Error::ControlWeightSingular => write!(f, "control weight R(t) is not invertible"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::FingerprintMismatch { expected, found } => {
                write!(f, "system fingerprint mismatch: archive {found}, assembled {expected}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
