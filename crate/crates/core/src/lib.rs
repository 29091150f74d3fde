// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod expfam;
pub mod episode;
pub mod models;
pub mod harness;
pub mod io;
