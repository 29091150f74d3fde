use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::layer_sizes;
use super::{gaussian_ll_rows, EpisodeLossReport, Mlp, ModelConfig, ModelError, ModelResult, Prediction, StreamPath};
use crate::autodiff::{softplus_f64, AdResult, BoundParams, Matrix, ParamId, ParamSet, Tape, Var, SOFTPLUS_FLOOR};
use crate::episode::{Episode, Examples, Targets};
use crate::expfam::MatrixNormalState;

/// Bayesian linear regression on learned features (`tanh` of an MLP output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct AlpacaNet {
    features: usize,
    y_dim: usize,
    noise_var: f64,
    encoder: Mlp,
    prior_mean: ParamId,
    prior_raw: ParamId,
}

impl AlpacaNet {
    pub(super) fn new<R: Rng>(cfg: &ModelConfig, params: &mut ParamSet, rng: &mut R) -> Self {
        let f = cfg.z_dim;
        let encoder = Mlp::new(params, "encoder", &layer_sizes(cfg.domain.x_dim(), cfg.hidden, cfg.layers, f), rng);
        let prior_mean = params.push("prior.mean", Matrix::zeros(f, 1));
        let prior_raw = params.push("prior.raw_precision", Matrix::filled(1, f, crate::autodiff::inverse_softplus_f64(1.0)));
        AlpacaNet { features: f, y_dim: 1, noise_var: cfg.noise_var, encoder, prior_mean, prior_raw }
    }

    fn phi(&self, tape: &mut Tape, bound: &BoundParams, x: &Matrix) -> AdResult<Var> {
        let xv = tape.constant(x.clone());
        let h = self.encoder.forward(tape, bound, xv)?;
        Ok(tape.tanh(h))
    }

    pub(super) fn features(&self, tape: &mut Tape, bound: &BoundParams, x: &Matrix) -> AdResult<Var> {
        self.phi(tape, bound, x)
    }

    fn targets(ex: &Examples) -> ModelResult<&Matrix> {
        match &ex.y {
            Targets::Real(y) => Ok(y),
            _ => Err(ModelError::InvalidConfig("alpaca needs real-valued targets".into())),
        }
    }

    /// Test-set predictive NLL in kernel form: with `D = diag(lambda0)^-1`,
    /// `K = Phi D Phi^T + s2 I`, the posterior predictive at `q` has mean
    /// `q^T M0 + k_q^T K^-1 (Y - Phi M0)` and variance `s2 + q^T D q - k_q^T K^-1 k_q`,
    /// identical to the feature-space form but solved in `T x T`.
    pub(super) fn record_loss(&self, tape: &mut Tape, bound: &BoundParams, episode: &Episode) -> ModelResult<(Var, EpisodeLossReport)> {
        let t = episode.train.len();
        let n = episode.test.len();
        let phi = self.phi(tape, bound, &episode.train.x)?;
        let q = self.phi(tape, bound, &episode.test.x)?;
        let y = tape.constant(Self::targets(&episode.train)?.clone());
        let y_test = tape.constant(Self::targets(&episode.test)?.clone());
        let m0 = bound.var(self.prior_mean);

        let lambda0 = tape.positive(bound.var(self.prior_raw));
        let d = tape.reciprocal(lambda0);
        let q_prior = tape.matmul(q, m0)?;
        let dq = {
            let rows = tape.broadcast_rows(d, n)?;
            tape.mul(q, rows)?
        };
        let qdq = {
            let p = tape.mul(dq, q)?;
            tape.sum_cols(p)
        };
        let (mean, quad) = if t == 0 {
            (q_prior, qdq)
        } else {
            let dphi = {
                let rows = tape.broadcast_rows(d, t)?;
                tape.mul(phi, rows)?
            };
            let phi_t = tape.transpose(phi);
            let gram = tape.matmul(dphi, phi_t)?;
            let eye = tape.constant(Matrix::identity(t).scale(self.noise_var));
            let kmat = tape.add(gram, eye)?;
            let q_t = tape.transpose(q);
            let kq = tape.matmul(dphi, q_t)?;
            let prior_fit = tape.matmul(phi, m0)?;
            let resid = tape.sub(y, prior_fit)?;
            let alpha = tape.solve_spd(kmat, resid)?;
            let kq_t = tape.transpose(kq);
            let correction = tape.matmul(kq_t, alpha)?;
            let mean = tape.add(q_prior, correction)?;
            let s = tape.solve_spd(kmat, kq)?;
            let red = tape.mul(kq, s)?;
            let red = tape.sum_rows(red);
            let red = tape.transpose(red);
            (mean, tape.sub(qdq, red)?)
        };
        let var = tape.add_scalar(quad, self.noise_var);
        debug_assert_eq!(tape.shape(var), (n, 1));
        let ll = gaussian_ll_rows(tape, y_test, mean, var)?;
        let ll = tape.sum(ll);
        let loss = tape.neg(ll);
        let nll = tape.value(loss).item();
        Ok((loss, EpisodeLossReport { elbo: -nll, nll_train: 0.0, nll_test: nll, kl: 0.0, z_samples: Matrix::zeros(0, self.features) }))
    }

    fn prior_state(&self, tape: &Tape, bound: &BoundParams) -> ModelResult<MatrixNormalState> {
        let diag: Vec<f64> = tape.value(bound.var(self.prior_raw)).data().iter().map(|&r| softplus_f64(r) + SOFTPLUS_FLOOR).collect();
        Ok(MatrixNormalState::from_prior(tape.value(bound.var(self.prior_mean)), &diag, self.noise_var)?)
    }

    pub(super) fn learn_stream(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        train: &Examples,
        path: StreamPath,
    ) -> ModelResult<MatrixNormalState> {
        let y = Self::targets(train)?;
        let prior = self.prior_state(tape, bound)?;
        match path {
            StreamPath::Sequential => {
                let mut state = prior;
                for r in 0..train.len() {
                    let phi = self.phi(tape, bound, &Matrix::row(train.x.row_slice(r)))?;
                    state = state.update(tape.value(phi).data(), y.row_slice(r))?;
                }
                Ok(state)
            }
            StreamPath::Batch => {
                let phi = self.phi(tape, bound, &train.x)?;
                let phi = tape.value(phi);
                let inv = 1.0 / self.noise_var;
                let mut prec = prior.precision().clone();
                prec.add_assign(&phi.matmul_t(phi, true, false).scale(inv));
                let mut cross = prior.cross().clone();
                cross.add_assign(&phi.matmul_t(y, true, false).scale(inv));
                Ok(MatrixNormalState::new(prec, cross, self.noise_var)?)
            }
        }
    }

    pub(super) fn predict(&self, tape: &mut Tape, bound: &BoundParams, state: &MatrixNormalState, x: &Matrix) -> ModelResult<Prediction> {
        let phi = self.phi(tape, bound, x)?;
        let phi = tape.value(phi);
        let (means, var) = state.predict_rows(phi)?;
        let vars = Matrix::from_vec(x.rows(), 1, var).matmul(&Matrix::filled(1, self.y_dim, 1.0));
        Ok(Prediction::Regression { means: vec![means], vars: vec![vars] })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{HeadKind, Posterior, PredictMode, SbmclModel};
    use super::*;
    use crate::episode::{gen_episode, Domain, EpisodeId, Split, StreamSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> SbmclModel {
        let mut cfg = ModelConfig::new(HeadKind::Alpaca, Domain::Sine);
        cfg.z_dim = 6;
        cfg.hidden = 8;
        cfg.layers = 1;
        cfg.noise_var = 0.5;
        SbmclModel::new(cfg, 4).unwrap()
    }

    #[test]
    fn tape_loss_matches_conjugate_predictive() {
        let m = model();
        let ep = gen_episode(&StreamSpec::new(Domain::Sine, 3, 2, 8), EpisodeId::new(Split::MetaTrain, 3)).unwrap();
        let report = m.elbo_with_eps(&ep, &Matrix::zeros(0, 6)).unwrap();
        let seq = m.learn_stream(&ep.train, StreamPath::Sequential).unwrap();
        let batch = m.learn_stream(&ep.train, StreamPath::Batch).unwrap();
        let (Posterior::MatrixNormal(a), Posterior::MatrixNormal(b)) = (&seq, &batch) else { panic!() };
        assert!(a.precision().max_abs_diff(b.precision()) < 1e-10);
        assert!(a.cross().max_abs_diff(b.cross()) < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pred = m.predict(&seq, &ep.test.x, PredictMode::DEFAULT_MC, &mut rng).unwrap();
        let nll = -pred.log_likelihood(&ep.test).iter().sum::<f64>();
        assert!((nll - report.nll_test).abs() < 1e-8 * (1.0 + nll.abs()), "{nll} vs {}", report.nll_test);
    }
}
