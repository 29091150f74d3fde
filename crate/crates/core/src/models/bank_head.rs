use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::layer_sizes;
use super::{onehot, standard_normal_matrix, EpisodeLossReport, Mlp, ModelConfig, ModelError, ModelResult, PredictMode, Prediction, StreamPath};
use crate::autodiff::{inverse_softplus_f64, AdResult, BoundParams, Matrix, ParamId, ParamSet, Tape, Var, SOFTPLUS_FLOOR};
use crate::episode::{Episode, Examples, Targets};
use crate::expfam::{ClassifyMode, ClasswiseGaussianBank, FactorizedGaussian, NoisyObservation};
use crate::models::HeadKind;

/// Prior precision of the prototypical head; effectively an improper flat prior.
pub const PN_PRIOR_PRECISION: f64 = 1e-8;

/// Class-conditional Gaussian heads over a learned embedding.
///
/// `gemcl`: the encoder emits an embedding and a per-dimension precision;
/// the prior over class means and the embedding noise are learned.
/// `pn`: unit observation precision, a near-flat prior and
/// negative-squared-distance scores, which reproduces class-mean prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct BankNet {
    kind: HeadKind,
    dim: usize,
    encoder: Mlp,
    prior: Option<(ParamId, ParamId)>,
    obs_raw: Option<ParamId>,
}

impl BankNet {
    pub(super) fn new<R: Rng>(cfg: &ModelConfig, params: &mut ParamSet, rng: &mut R) -> Self {
        let e = cfg.z_dim;
        let gemcl = cfg.head == HeadKind::Gemcl;
        let out = if gemcl { 2 * e } else { e };
        let encoder = Mlp::new(params, "encoder", &layer_sizes(cfg.domain.x_dim(), cfg.hidden, cfg.layers, out), rng);
        let (prior, obs_raw) = if gemcl {
            let mu = params.push("prior.mu", Matrix::zeros(1, e));
            let raw = params.push("prior.raw_precision", Matrix::filled(1, e, inverse_softplus_f64(1.0 - SOFTPLUS_FLOOR)));
            let obs = params.push("likelihood.raw_var", Matrix::filled(1, e, inverse_softplus_f64(1.0)));
            (Some((mu, raw)), Some(obs))
        } else {
            (None, None)
        };
        BankNet { kind: cfg.head, dim: e, encoder, prior, obs_raw }
    }

    /// Embeddings and observation precisions, each `N x E`.
    fn embed(&self, tape: &mut Tape, bound: &BoundParams, x: &Matrix) -> AdResult<(Var, Var)> {
        let xv = tape.constant(x.clone());
        let out = self.encoder.forward(tape, bound, xv)?;
        if self.kind == HeadKind::Gemcl {
            let e = tape.slice_cols(out, 0..self.dim)?;
            let raw = tape.slice_cols(out, self.dim..2 * self.dim)?;
            Ok((e, tape.positive(raw)))
        } else {
            let ones = tape.constant(Matrix::filled(x.rows(), self.dim, 1.0));
            Ok((out, ones))
        }
    }

    pub(super) fn features(&self, tape: &mut Tape, bound: &BoundParams, x: &Matrix) -> AdResult<Var> {
        Ok(self.embed(tape, bound, x)?.0)
    }

    /// Prior `(mu0, lambda0)` and embedding noise variance, each `1 x E`.
    fn prior_vars(&self, tape: &mut Tape, bound: &BoundParams) -> (Var, Var, Var) {
        match (self.prior, self.obs_raw) {
            (Some((mu, raw)), Some(obs)) => {
                let lambda = tape.positive(bound.var(raw));
                let var = tape.positive(bound.var(obs));
                (bound.var(mu), lambda, var)
            }
            _ => (
                tape.constant(Matrix::zeros(1, self.dim)),
                tape.constant(Matrix::filled(1, self.dim, PN_PRIOR_PRECISION)),
                tape.constant(Matrix::filled(1, self.dim, 1.0)),
            ),
        }
    }

    fn empty_bank(&self, tape: &mut Tape, bound: &BoundParams) -> ModelResult<ClasswiseGaussianBank> {
        let (mu, lambda, var) = self.prior_vars(tape, bound);
        let prior = FactorizedGaussian::new(tape.value(mu).data().to_vec(), tape.value(lambda).data().to_vec())?;
        Ok(ClasswiseGaussianBank::new(prior, tape.value(var).data().to_vec())?)
    }

    pub(super) fn record_loss(&self, tape: &mut Tape, bound: &BoundParams, episode: &Episode) -> ModelResult<(Var, EpisodeLossReport)> {
        let (Targets::Labels(train_y), Targets::Labels(test_y)) = (&episode.train.y, &episode.test.y) else {
            return Err(ModelError::InvalidConfig("classification heads need labelled examples".into()));
        };
        let classes = train_y.iter().chain(test_y).max().map_or(1, |m| m + 1);
        let (e, p) = self.embed(tape, bound, &episode.train.x)?;
        let (mu0, lambda0, obs_var) = self.prior_vars(tape, bound);

        // Per-class natural parameters, C x E.
        let yt = tape.constant(onehot(train_y, classes)?.transpose());
        let sum_p = tape.matmul(yt, p)?;
        let pe = tape.mul(p, e)?;
        let sum_pe = tape.matmul(yt, pe)?;
        let lambda = tape.add(sum_p, lambda0)?;
        let prior_w = tape.mul(lambda0, mu0)?;
        let w = tape.add(sum_pe, prior_w)?;
        let mu = tape.div(w, lambda)?;

        let (q, _) = self.embed(tape, bound, &episode.test.x)?;
        let scores = self.scores(tape, q, mu, lambda, obs_var)?;
        let logp = tape.log_softmax_rows(scores);
        let mask = tape.constant(onehot(test_y, classes)?);
        let picked = tape.mul(logp, mask)?;
        let ll = tape.sum(picked);
        let loss = tape.neg(ll);
        let nll = tape.value(loss).item();
        Ok((loss, EpisodeLossReport { elbo: -nll, nll_train: 0.0, nll_test: nll, kl: 0.0, z_samples: Matrix::zeros(0, self.dim) }))
    }

    /// Query-by-class scores `N x C`: the analytic predictive log-density for
    /// `gemcl`, negative squared distance for `pn`.
    fn scores(&self, tape: &mut Tape, q: Var, mu: Var, lambda: Var, obs_var: Var) -> AdResult<Var> {
        let n = tape.shape(q).0;
        let c = tape.shape(mu).0;
        let q2 = tape.square(q);
        let (inv_v, log_term) = if self.kind == HeadKind::Gemcl {
            let post_var = tape.reciprocal(lambda);
            let var_rows = tape.broadcast_rows(obs_var, c)?;
            let v = tape.add(post_var, var_rows)?;
            let lv = tape.log(v);
            let lv = tape.add_scalar(lv, (2.0 * std::f64::consts::PI).ln());
            (tape.reciprocal(v), Some(lv))
        } else {
            (tape.constant(Matrix::filled(c, self.dim, 1.0)), None)
        };
        // sum_e (q - mu)^2 / v  =  q^2 . (1/v)  -  2 q . (mu / v)  +  sum_e mu^2 / v
        let inv_vt = tape.transpose(inv_v);
        let a = tape.matmul(q2, inv_vt)?;
        let mu_over_v = tape.mul(mu, inv_v)?;
        let mvt = tape.transpose(mu_over_v);
        let b = tape.matmul(q, mvt)?;
        let b = tape.scale(b, -2.0);
        let mu2 = tape.square(mu);
        let mut per_class = tape.mul(mu2, inv_v)?;
        if let Some(lv) = log_term {
            per_class = tape.add(per_class, lv)?;
        }
        let per_class = tape.sum_cols(per_class);
        let per_class = tape.transpose(per_class);
        let ab = tape.add(a, b)?;
        let quad = tape.add(ab, per_class)?;
        debug_assert_eq!(tape.shape(quad), (n, c));
        Ok(tape.scale(quad, if self.kind == HeadKind::Gemcl { -0.5 } else { -1.0 }))
    }

    pub(super) fn learn_stream(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        train: &Examples,
        path: StreamPath,
    ) -> ModelResult<ClasswiseGaussianBank> {
        let Targets::Labels(labels) = &train.y else {
            return Err(ModelError::InvalidConfig("classification heads need labelled examples".into()));
        };
        let mut bank = self.empty_bank(tape, bound)?;
        match path {
            StreamPath::Sequential => {
                for (r, &label) in labels.iter().enumerate() {
                    let (e, p) = self.embed(tape, bound, &Matrix::row(train.x.row_slice(r)))?;
                    let obs = NoisyObservation::new(tape.value(e).data().to_vec(), tape.value(p).data().to_vec())?;
                    bank = bank.update(label, &obs)?;
                }
            }
            StreamPath::Batch => {
                let (e, p) = self.embed(tape, bound, &train.x)?;
                let (e, p) = (tape.value(e), tape.value(p));
                let mut groups: std::collections::BTreeMap<usize, Vec<NoisyObservation>> = Default::default();
                for (r, &label) in labels.iter().enumerate() {
                    groups.entry(label).or_default().push(NoisyObservation::new(e.row_slice(r).to_vec(), p.row_slice(r).to_vec())?);
                }
                for (label, obs) in &groups {
                    bank = bank.batch_update(*label, obs)?;
                }
            }
        }
        Ok(bank)
    }

    pub(super) fn predict<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        bank: &ClasswiseGaussianBank,
        x: &Matrix,
        mode: PredictMode,
        rng: &mut R,
    ) -> ModelResult<Prediction> {
        let (q, _) = self.embed(tape, bound, x)?;
        let q = tape.value(q).clone();
        let classes = bank.labels().last().map_or(0, |l| l + 1);
        let eps: Vec<Vec<f64>> = match mode {
            PredictMode::MonteCarlo(s) if self.kind == HeadKind::Gemcl => {
                let m = standard_normal_matrix(rng, s, self.dim);
                (0..s).map(|i| m.row_slice(i).to_vec()).collect()
            }
            _ => Vec::new(),
        };
        let cmode = match (self.kind, mode) {
            (HeadKind::Pn, _) => ClassifyMode::Prototype,
            (_, PredictMode::Map) => ClassifyMode::Map,
            (_, PredictMode::MonteCarlo(_)) => ClassifyMode::MonteCarlo(&eps),
        };
        let mut probs = Matrix::zeros(x.rows(), classes);
        for r in 0..x.rows() {
            let scores = bank.classify(q.row_slice(r), cmode)?;
            let mx = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = scores.iter().map(|s| (s.1 - mx).exp()).sum();
            for (label, s) in scores {
                probs.set(r, label, (s - mx).exp() / total);
            }
        }
        Ok(Prediction::Classification { probs })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Posterior, SbmclModel};
    use super::*;
    use crate::episode::{gen_episode, Domain, EpisodeId, Split, StreamSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(head: HeadKind) -> SbmclModel {
        let mut cfg = ModelConfig::new(head, Domain::SynthClassify);
        cfg.z_dim = 4;
        cfg.hidden = 8;
        cfg.layers = 1;
        SbmclModel::new(cfg, 9).unwrap()
    }

    fn episode() -> Episode {
        gen_episode(&StreamSpec::new(Domain::SynthClassify, 4, 3, 2), EpisodeId::new(Split::MetaTest, 1)).unwrap()
    }

    #[test]
    fn tape_loss_matches_bank_predictive() {
        let ep = episode();
        for head in [HeadKind::Gemcl, HeadKind::Pn] {
            let m = model(head);
            let report = m.elbo_with_eps(&ep, &Matrix::zeros(0, 4)).unwrap();
            let Posterior::Bank(bank) = m.learn_stream(&ep.train, StreamPath::Batch).unwrap() else { panic!() };
            let mut tape = Tape::new();
            let bound = m.params().bind_frozen(&mut tape);
            let Arch::Bank(net) = &m.arch else { panic!() };
            let (q, _) = net.embed(&mut tape, &bound, &ep.test.x).unwrap();
            let q = tape.value(q).clone();
            let mode = if head == HeadKind::Pn { ClassifyMode::Prototype } else { ClassifyMode::Predictive };
            let Targets::Labels(labels) = &ep.test.y else { panic!() };
            let mut nll = 0.0;
            for (r, &l) in labels.iter().enumerate() {
                let scores = bank.classify(q.row_slice(r), mode).unwrap();
                let vals: Vec<f64> = scores.iter().map(|s| s.1).collect();
                let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + vals.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                nll -= scores[l].1 - lse;
            }
            assert!((report.nll_test - nll).abs() < 1e-8 * (1.0 + nll.abs()), "{head:?}: {} vs {nll}", report.nll_test);
        }
    }

    use super::super::Arch;

    #[test]
    fn pn_bank_means_are_class_averages() {
        let ep = episode();
        let m = model(HeadKind::Pn);
        let Posterior::Bank(bank) = m.learn_stream(&ep.train, StreamPath::Sequential).unwrap() else { panic!() };
        let mut tape = Tape::new();
        let bound = m.params().bind_frozen(&mut tape);
        let Arch::Bank(net) = &m.arch else { panic!() };
        let (e, _) = net.embed(&mut tape, &bound, &ep.train.x).unwrap();
        let e = tape.value(e).clone();
        let Targets::Labels(labels) = &ep.train.y else { panic!() };
        for c in 0..4 {
            let rows: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] == c).collect();
            for j in 0..4 {
                let avg = rows.iter().map(|&r| e.get(r, j)).sum::<f64>() / rows.len() as f64;
                assert!((bank.posterior(c).unwrap().mu()[j] - avg).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sequential_and_batch_banks_agree_and_predict() {
        let ep = episode();
        let m = model(HeadKind::Gemcl);
        let Posterior::Bank(a) = m.learn_stream(&ep.train, StreamPath::Sequential).unwrap() else { panic!() };
        let Posterior::Bank(b) = m.learn_stream(&ep.train, StreamPath::Batch).unwrap() else { panic!() };
        for c in 0..4 {
            let (pa, pb) = (a.posterior(c).unwrap(), b.posterior(c).unwrap());
            for (x, y) in pa.mu().iter().zip(pb.mu()).chain(pa.lambda().iter().zip(pb.lambda())) {
                assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pred = m.predict(&Posterior::Bank(a), &ep.test.x, PredictMode::DEFAULT_MC, &mut rng).unwrap();
        let Prediction::Classification { probs } = pred else { panic!() };
        for r in 0..probs.rows() {
            assert!((probs.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
