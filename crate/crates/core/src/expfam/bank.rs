use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{FactorizedGaussian, NoisyObservation, PosteriorError};

/// One Gaussian posterior per label in a shared embedding space.
///
/// Each class mean `m_c` has posterior `N(mu_c, lambda_c^-1)`; an embedding
/// of class `c` is modelled as `N(e; m_c, obs_var)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClasswiseGaussianBank {
    prior: FactorizedGaussian,
    obs_var: Vec<f64>,
    classes: BTreeMap<usize, FactorizedGaussian>,
}

/// Scoring rule for [`ClasswiseGaussianBank::classify`].
#[derive(Debug, Clone, Copy)]
pub enum ClassifyMode<'a> {
    /// Likelihood at the posterior mode of each class mean.
    Map,
    /// Analytic posterior predictive `N(e; mu_c, lambda_c^-1 + obs_var)`.
    Predictive,
    /// Log of the average likelihood over class means drawn by
    /// reparameterization with the given standard-normal draws (one row per sample).
    MonteCarlo(&'a [Vec<f64>]),
    /// Negative squared Euclidean distance to each posterior mean.
    Prototype,
}

impl ClasswiseGaussianBank {
    pub fn new(prior: FactorizedGaussian, obs_var: Vec<f64>) -> Result<Self, PosteriorError> {
        if obs_var.len() != prior.dim() {
            return Err(PosteriorError::DimMismatch { expected: prior.dim(), got: obs_var.len() });
        }
        if obs_var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(PosteriorError::NonPositivePrecision);
        }
        Ok(ClasswiseGaussianBank { prior, obs_var, classes: BTreeMap::new() })
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn prior(&self) -> &FactorizedGaussian {
        &self.prior
    }

    pub fn obs_var(&self) -> &[f64] {
        &self.obs_var
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn posterior(&self, label: usize) -> Option<&FactorizedGaussian> {
        self.classes.get(&label)
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.keys().copied()
    }

    /// Updates only `label`'s posterior; an unseen label starts from the shared prior.
    pub fn update(&self, label: usize, obs: &NoisyObservation) -> Result<Self, PosteriorError> {
        let current = self.classes.get(&label).unwrap_or(&self.prior);
        let next = current.seq_update(obs)?;
        let mut out = self.clone();
        out.classes.insert(label, next);
        Ok(out)
    }

    /// Folds several observations of `label` at once with the batch rule.
    pub fn batch_update<'a>(
        &self,
        label: usize,
        observations: impl IntoIterator<Item = &'a NoisyObservation>,
    ) -> Result<Self, PosteriorError> {
        let current = self.classes.get(&label).unwrap_or(&self.prior);
        let next = current.batch_update(observations)?;
        let mut out = self.clone();
        out.classes.insert(label, next);
        Ok(out)
    }

    /// Scores for every stored label, in ascending label order.
    pub fn classify(&self, embedding: &[f64], mode: ClassifyMode<'_>) -> Result<Vec<(usize, f64)>, PosteriorError> {
        if self.classes.is_empty() {
            return Err(PosteriorError::EmptyBank);
        }
        if embedding.len() != self.dim() {
            return Err(PosteriorError::DimMismatch { expected: self.dim(), got: embedding.len() });
        }
        let mut scores = Vec::with_capacity(self.classes.len());
        for (&label, post) in &self.classes {
            let score = match mode {
                ClassifyMode::Map => gaussian_log_density(embedding, post.mu(), &self.obs_var),
                ClassifyMode::Predictive => post.log_density_with_extra_var(embedding, &self.obs_var),
                ClassifyMode::Prototype => {
                    -embedding.iter().zip(post.mu()).map(|(e, m)| (e - m) * (e - m)).sum::<f64>()
                }
                ClassifyMode::MonteCarlo(eps) => {
                    let logs = eps
                        .iter()
                        .map(|e| Ok(gaussian_log_density(embedding, &post.reparam_sample(e)?, &self.obs_var)))
                        .collect::<Result<Vec<f64>, PosteriorError>>()?;
                    log_mean_exp(&logs)
                }
            };
            scores.push((label, score));
        }
        Ok(scores)
    }

    /// Label with the highest score; ties go to the smallest label.
    pub fn predict(&self, embedding: &[f64], mode: ClassifyMode<'_>) -> Result<usize, PosteriorError> {
        let scores = self.classify(embedding, mode)?;
        Ok(argmax_label(&scores))
    }
}

pub(crate) fn argmax_label(scores: &[(usize, f64)]) -> usize {
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    best.0
}

pub(crate) fn gaussian_log_density(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m) * (x - m) / v))
        .sum()
}

pub(crate) fn log_mean_exp(values: &[f64]) -> f64 {
    let mx = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + (values.iter().map(|v| (v - mx).exp()).sum::<f64>() / values.len() as f64).ln()
}
