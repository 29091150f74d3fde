//! Differentiable counterparts of the Gaussian update, KL and sampling rules,
//! recorded on an autodiff [`Tape`] for meta-training.

use crate::autodiff::{AdResult, Matrix, Tape, Var};

use super::FactorizedGaussian;

/// A factorized Gaussian whose mean and precision (`1 x D` rows) live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TrackedGaussian {
    pub mu: Var,
    pub lambda: Var,
}

impl TrackedGaussian {
    pub fn constant(tape: &mut Tape, g: &FactorizedGaussian) -> Self {
        TrackedGaussian { mu: tape.constant(Matrix::row(g.mu())), lambda: tape.constant(Matrix::row(g.lambda())) }
    }

    pub fn dim(&self, tape: &Tape) -> usize {
        tape.shape(self.mu).1
    }

    pub fn to_value(&self, tape: &Tape) -> FactorizedGaussian {
        FactorizedGaussian::new(tape.value(self.mu).data().to_vec(), tape.value(self.lambda).data().to_vec())
            .expect("tracked state holds a valid Gaussian")
    }

    /// One sequential step with a `1 x D` observation.
    pub fn seq_update(&self, tape: &mut Tape, z_hat: Var, precision: Var) -> AdResult<Self> {
        let lambda = tape.add(self.lambda, precision)?;
        let prior_w = tape.mul(self.lambda, self.mu)?;
        let obs_w = tape.mul(precision, z_hat)?;
        let w = tape.add(prior_w, obs_w)?;
        let mu = tape.div(w, lambda)?;
        Ok(TrackedGaussian { mu, lambda })
    }

    /// Batch rule over `T x D` observations (one row per example).
    pub fn batch_update(&self, tape: &mut Tape, z_hat: Var, precision: Var) -> AdResult<Self> {
        if tape.shape(z_hat).0 == 0 {
            return Ok(*self);
        }
        let total_p = tape.sum_rows(precision);
        let lambda = tape.add(self.lambda, total_p)?;
        let pz = tape.mul(precision, z_hat)?;
        let obs_w = tape.sum_rows(pz);
        let prior_w = tape.mul(self.lambda, self.mu)?;
        let w = tape.add(prior_w, obs_w)?;
        let mu = tape.div(w, lambda)?;
        Ok(TrackedGaussian { mu, lambda })
    }

    /// `KL(self || N(0, I))`.
    pub fn kl_to_unit(&self, tape: &mut Tape) -> AdResult<Var> {
        let inv = tape.reciprocal(self.lambda);
        let mu2 = tape.square(self.mu);
        let log_l = tape.log(self.lambda);
        let a = tape.add(inv, mu2)?;
        let b = tape.add(a, log_l)?;
        let c = tape.add_scalar(b, -1.0);
        let s = tape.sum(c);
        Ok(tape.scale(s, 0.5))
    }

    /// `KL(self || other)` for a general diagonal Gaussian `other`.
    pub fn kl_to(&self, tape: &mut Tape, other: &TrackedGaussian) -> AdResult<Var> {
        let ratio = tape.div(other.lambda, self.lambda)?;
        let diff = tape.sub(self.mu, other.mu)?;
        let d2 = tape.square(diff);
        let quad = tape.mul(other.lambda, d2)?;
        let inv_ratio = tape.reciprocal(ratio);
        let log_term = tape.log(inv_ratio);
        let a = tape.add(ratio, quad)?;
        let b = tape.add(a, log_term)?;
        let c = tape.add_scalar(b, -1.0);
        let s = tape.sum(c);
        Ok(tape.scale(s, 0.5))
    }

    /// Reparameterized samples `mu + lambda^{-1/2} * eps` for each row of `eps` (`S x D`).
    pub fn reparam(&self, tape: &mut Tape, eps: &Matrix) -> AdResult<Var> {
        let s = eps.rows();
        let eps = tape.constant(eps.clone());
        let root = tape.sqrt(self.lambda);
        let std = tape.reciprocal(root);
        let std_rows = tape.broadcast_rows(std, s)?;
        let noise = tape.mul(std_rows, eps)?;
        tape.add(noise, self.mu)
    }
}
