//! Error type shared by all modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A constructor or operation was handed an argument that violates its
    /// preconditions.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// Least-squares design is numerically rank-deficient or underdetermined.
    /// Carries the column-scaled condition estimate (infinite when the
    /// system is underdetermined or a column is identically zero).
    #[error("ill-conditioned regression (condition estimate {condition:.3e})")]
    IllConditioned { condition: f64 },

    /// A ratio with a zero denominator was requested (e.g. PAR of an
    /// all-zero signal, NMSE against a zero reference).
    #[error("undefined ratio: {0}")]
    UndefinedRatio(&'static str),

    /// A scalar projection onto a zero-norm direction was requested.
    #[error("degenerate projection: {0}")]
    DegenerateProjection(&'static str),

    /// No pilot harmonic falls inside the required band.
    #[error("empty pilot band: {0}")]
    EmptyBand(String),

    /// A pipeline step failed; wraps the underlying error with attribution.
    #[error("{step} failed: {source}")]
    Step {
        step: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub fn in_step(self, step: &'static str) -> Self {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }

    /// True when this error (or the error it wraps) is a conditioning error.
    pub fn is_conditioning(&self) -> bool {
        match self {
            Error::IllConditioned { .. } => true,
            Error::Step { source, .. } => source.is_conditioning(),
            _ => false,
        }
    }
}
