//! Minimal reverse-mode automatic differentiation over dense 2-D arrays.

mod adam;
mod matrix;
mod params;
mod tape;

pub use adam::Adam;
pub use matrix::{cholesky, cholesky_solve, Matrix};
pub use params::{BoundParams, ParamId, ParamSet};
pub use tape::{inverse_softplus_f64, softplus_f64, AdError, AdResult, Gradients, Tape, Var, SOFTPLUS_FLOOR};
