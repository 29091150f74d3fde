use serde::{Deserialize, Serialize};

use super::PosteriorError;
use crate::autodiff::{cholesky, cholesky_solve, Matrix};

/// Conjugate Bayesian linear regression state for a weight matrix
/// `W` (`d_phi x d_y`) with `y = W^T phi + noise`, `noise ~ N(0, noise_var I)`.
///
/// The state keeps natural parameters: `precision` is the posterior
/// precision of each weight column and `cross` accumulates
/// `prior_precision * prior_mean + sum phi y^T / noise_var`, so the
/// posterior mean is `precision^{-1} cross`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixNormalState {
    precision: Matrix,
    cross: Matrix,
    noise_var: f64,
}

impl MatrixNormalState {
    pub fn new(precision: Matrix, cross: Matrix, noise_var: f64) -> Result<Self, PosteriorError> {
        let (r, c) = precision.shape();
        if r != c {
            return Err(PosteriorError::DimMismatch { expected: r, got: c });
        }
        if cross.rows() != r {
            return Err(PosteriorError::DimMismatch { expected: r, got: cross.rows() });
        }
        if !(noise_var > 0.0) || !precision.is_finite() || !cross.is_finite() {
            return Err(PosteriorError::NonPositivePrecision);
        }
        cholesky(&precision).ok_or(PosteriorError::Singular)?;
        Ok(MatrixNormalState { precision, cross, noise_var })
    }

    /// Prior with mean weights `mean` and diagonal precision `diag`.
    pub fn from_prior(mean: &Matrix, diag: &[f64], noise_var: f64) -> Result<Self, PosteriorError> {
        let d = diag.len();
        let mut precision = Matrix::zeros(d, d);
        for (i, &v) in diag.iter().enumerate() {
            precision.set(i, i, v);
        }
        let mut cross = mean.clone();
        for (i, &v) in diag.iter().enumerate() {
            for j in 0..mean.cols() {
                cross.set(i, j, v * mean.get(i, j));
            }
        }
        Self::new(precision, cross, noise_var)
    }

    pub fn feature_dim(&self) -> usize {
        self.precision.rows()
    }

    pub fn target_dim(&self) -> usize {
        self.cross.cols()
    }

    pub fn precision(&self) -> &Matrix {
        &self.precision
    }

    pub fn cross(&self) -> &Matrix {
        &self.cross
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    /// Adds one `(phi, y)` pair: `precision += phi phi^T / s2`, `cross += phi y^T / s2`.
    pub fn update(&self, phi: &[f64], y: &[f64]) -> Result<Self, PosteriorError> {
        let d = self.feature_dim();
        if phi.len() != d {
            return Err(PosteriorError::DimMismatch { expected: d, got: phi.len() });
        }
        if y.len() != self.target_dim() {
            return Err(PosteriorError::DimMismatch { expected: self.target_dim(), got: y.len() });
        }
        let mut next = self.clone();
        let inv = 1.0 / self.noise_var;
        for i in 0..d {
            if phi[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                let v = next.precision.get(i, j) + phi[i] * phi[j] * inv;
                next.precision.set(i, j, v);
            }
            for (k, yk) in y.iter().enumerate() {
                let v = next.cross.get(i, k) + phi[i] * yk * inv;
                next.cross.set(i, k, v);
            }
        }
        Ok(next)
    }

    /// Posterior mean of the weight matrix, `precision^{-1} cross`.
    pub fn mean_weights(&self) -> Result<Matrix, PosteriorError> {
        let l = cholesky(&self.precision).ok_or(PosteriorError::Singular)?;
        Ok(cholesky_solve(&l, &self.cross))
    }

    /// Posterior predictive at `phi`: mean `W_mean^T phi` and per-output
    /// variance `noise_var + phi^T precision^{-1} phi`.
    pub fn predict(&self, phi: &[f64]) -> Result<(Vec<f64>, f64), PosteriorError> {
        let (mean, var) = self.predict_rows(&Matrix::row(phi))?;
        Ok((mean.row_slice(0).to_vec(), var[0]))
    }

    /// [`predict`](Self::predict) for every row of `phis` (`N x d_phi`),
    /// factoring the precision once.
    pub fn predict_rows(&self, phis: &Matrix) -> Result<(Matrix, Vec<f64>), PosteriorError> {
        let d = self.feature_dim();
        if phis.cols() != d {
            return Err(PosteriorError::DimMismatch { expected: d, got: phis.cols() });
        }
        let l = cholesky(&self.precision).ok_or(PosteriorError::Singular)?;
        let w = cholesky_solve(&l, &self.cross);
        let mean = phis.matmul(&w);
        let s = cholesky_solve(&l, &phis.transpose());
        let var = (0..phis.rows())
            .map(|n| self.noise_var + (0..d).map(|i| phis.get(n, i) * s.get(i, n)).sum::<f64>())
            .collect();
        Ok((mean, var))
    }
}
