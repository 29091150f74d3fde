//! Exponential-family posterior states and their conjugate update rules.

mod bank;
mod gaussian;
mod matrix_normal;
mod tracked;

use thiserror::Error;

pub use bank::{ClassifyMode, ClasswiseGaussianBank};
pub(crate) use bank::{gaussian_log_density, log_mean_exp};
pub use gaussian::{FactorizedGaussian, NoisyObservation};
pub use matrix_normal::MatrixNormalState;
pub use tracked::TrackedGaussian;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PosteriorError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite value in posterior state or observation")]
    NonFinite,
    #[error("precision must be positive")]
    NonPositivePrecision,
    #[error("precision matrix is not positive definite")]
    Singular,
    #[error("classification needs at least one stored class")]
    EmptyBank,
}
