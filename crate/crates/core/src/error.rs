use thiserror::Error;

/// Errors produced by the solvers and their supporting geometry.
#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a structural invariant (degenerate polygon, bad mesh, length mismatch).
    #[error("validation error: {0}")]
    Validation(String),

    /// A caller-supplied argument is out of range or inconsistent.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A request would exceed a configured resource bound.
    #[error("resource limit: {0}")]
    Resource(String),

    /// The operation does not support this input configuration.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    /// Ω_m is not contained where it must be.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("meshing failed: {0}")]
    Meshing(String),

    /// Factorization breakdown, non-finite values, and similar.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("eigensolver failed: {0}")]
    Spectral(String),

    /// Data norm exceeds the admissible threshold `(νε/C₁)·r`.
    #[error("smallness gate violated: data norm {data_norm:.6e} > threshold {threshold:.6e}")]
    Smallness { data_norm: f64, threshold: f64 },

    #[error(
        "fixed-point iteration diverged after {iterations} iterations (last ratio {last_ratio:.4})"
    )]
    Divergence { iterations: usize, last_ratio: f64 },

    #[error("fixed-point iteration did not converge in {iterations} iterations (last increment {last_increment:.4e})")]
    NonConvergence {
        iterations: usize,
        last_increment: f64,
    },

    #[error("empty system: {0}")]
    EmptySystem(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// `true` for errors caused by malformed input rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Argument(_)
                | Error::Resource(_)
                | Error::Unsupported(_)
                | Error::Domain(_)
                | Error::EmptySystem(_)
                | Error::Parse(_)
        )
    }
}
