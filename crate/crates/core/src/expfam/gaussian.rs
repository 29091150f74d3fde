use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::PosteriorError;

/// Diagonal-precision Gaussian `N(mu, diag(lambda)^-1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedGaussian {
    mu: Vec<f64>,
    lambda: Vec<f64>,
}

/// A noisy observation `z_hat` of the latent with diagonal precision `precision`.
///
/// Zero precision entries are allowed and carry no information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyObservation {
    z_hat: Vec<f64>,
    precision: Vec<f64>,
}

fn check_finite(values: &[f64]) -> Result<(), PosteriorError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(PosteriorError::NonFinite)
    }
}

fn check_dim(expected: usize, got: usize) -> Result<(), PosteriorError> {
    if expected == got {
        Ok(())
    } else {
        Err(PosteriorError::DimMismatch { expected, got })
    }
}

impl FactorizedGaussian {
    pub fn new(mu: Vec<f64>, lambda: Vec<f64>) -> Result<Self, PosteriorError> {
        check_dim(mu.len(), lambda.len())?;
        check_finite(&mu)?;
        check_finite(&lambda)?;
        if lambda.iter().any(|&l| l <= 0.0) {
            return Err(PosteriorError::NonPositivePrecision);
        }
        Ok(FactorizedGaussian { mu, lambda })
    }

    /// `N(0, I)` in `dim` dimensions.
    pub fn unit(dim: usize) -> Self {
        FactorizedGaussian { mu: vec![0.0; dim], lambda: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// One step of the sequential rule: `lambda' = lambda + P`,
    /// `mu' = (lambda * mu + P * z_hat) / lambda'`.
    pub fn seq_update(&self, obs: &NoisyObservation) -> Result<Self, PosteriorError> {
        check_dim(self.dim(), obs.dim())?;
        let mut mu = Vec::with_capacity(self.dim());
        let mut lambda = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let l = self.lambda[i] + obs.precision[i];
            lambda.push(l);
            mu.push((self.lambda[i] * self.mu[i] + obs.precision[i] * obs.z_hat[i]) / l);
        }
        check_finite(&mu)?;
        check_finite(&lambda)?;
        Ok(FactorizedGaussian { mu, lambda })
    }

    /// Closed-form posterior from all observations at once: precisions add,
    /// and the mean is the precision-weighted average including the prior.
    pub fn batch_update<'a>(
        &self,
        observations: impl IntoIterator<Item = &'a NoisyObservation>,
    ) -> Result<Self, PosteriorError> {
        let d = self.dim();
        let mut lambda = self.lambda.clone();
        let mut weighted: Vec<f64> = self.lambda.iter().zip(&self.mu).map(|(l, m)| l * m).collect();
        for obs in observations {
            check_dim(d, obs.dim())?;
            for i in 0..d {
                lambda[i] += obs.precision[i];
                weighted[i] += obs.precision[i] * obs.z_hat[i];
            }
        }
        let mu: Vec<f64> = weighted.iter().zip(&lambda).map(|(w, l)| w / l).collect();
        check_finite(&mu)?;
        check_finite(&lambda)?;
        Ok(FactorizedGaussian { mu, lambda })
    }

    /// `KL(self || other)`, summed over dimensions.
    pub fn kl_to(&self, other: &FactorizedGaussian) -> Result<f64, PosteriorError> {
        check_dim(self.dim(), other.dim())?;
        let mut kl = 0.0;
        for i in 0..self.dim() {
            let (mq, lq, mp, lp) = (self.mu[i], self.lambda[i], other.mu[i], other.lambda[i]);
            if lq <= 0.0 || lp <= 0.0 {
                return Err(PosteriorError::NonPositivePrecision);
            }
            let diff = mq - mp;
            kl += 0.5 * (lp / lq + lp * diff * diff - 1.0 + (lq / lp).ln());
        }
        Ok(kl)
    }

    /// Reparameterized draw `mu + lambda^{-1/2} * eps`.
    pub fn reparam_sample(&self, eps: &[f64]) -> Result<Vec<f64>, PosteriorError> {
        check_dim(self.dim(), eps.len())?;
        Ok((0..self.dim()).map(|i| self.mu[i] + eps[i] / self.lambda[i].sqrt()).collect())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim()).map(|_| StandardNormal.sample(rng)).collect();
        self.reparam_sample(&eps).expect("dimension is consistent")
    }

    /// Mode of the Gaussian.
    pub fn map_point(&self) -> Vec<f64> {
        self.mu.clone()
    }

    /// `log N(x; mu, diag(lambda)^-1 + diag(extra_var))`.
    pub fn log_density_with_extra_var(&self, x: &[f64], extra_var: &[f64]) -> f64 {
        let mut lp = 0.0;
        for i in 0..self.dim() {
            let var = 1.0 / self.lambda[i] + extra_var[i];
            let d = x[i] - self.mu[i];
            lp += -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var);
        }
        lp
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.log_density_with_extra_var(x, &vec![0.0; self.dim()])
    }
}

impl NoisyObservation {
    pub fn new(z_hat: Vec<f64>, precision: Vec<f64>) -> Result<Self, PosteriorError> {
        check_dim(z_hat.len(), precision.len())?;
        check_finite(&z_hat)?;
        check_finite(&precision)?;
        if precision.iter().any(|&p| p < 0.0) {
            return Err(PosteriorError::NonPositivePrecision);
        }
        Ok(NoisyObservation { z_hat, precision })
    }

    pub fn dim(&self) -> usize {
        self.z_hat.len()
    }

    pub fn z_hat(&self) -> &[f64] {
        &self.z_hat
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }
}
