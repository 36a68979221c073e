use thiserror::Error;

use crate::optimizer::OptimizerTrace;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed problem instance: wrong shapes, non-finite entries, bad parameters.
    #[error("invalid instance: {0}")]
    Instance(String),

    #[error("{name} is not symmetric positive-definite (min eigenvalue {min_eig:e}, max {max_eig:e})")]
    NotPositiveDefinite {
        name: &'static str,
        min_eig: f64,
        max_eig: f64,
    },

    /// The closed loop fails the stability predicate the operation requires.
    #[error("gain is not stabilizing: {0}")]
    UnstableGain(String),

    #[error("fixed-point iteration did not converge after {iterations} iterations (last residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    /// The optimizer could not find a stabilizing perturbation; carries the trace up to that point.
    #[error("no stabilizing perturbation found after {attempts} attempts at episode {episode}")]
    StabilityBoundary {
        episode: usize,
        attempts: usize,
        trace: Box<OptimizerTrace>,
    },

    /// A hypothesis of the truncation-error bound does not hold.
    #[error("bound hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("empty distribution")]
    EmptyDistribution,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
