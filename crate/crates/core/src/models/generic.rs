use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::layer_sizes;
use super::{gaussian_ll_rows, onehot, EpisodeLossReport, Mlp, ModelConfig, ModelResult, Prediction, StreamPath, TaskKind};
use crate::autodiff::{inverse_softplus_f64, softplus_f64, AdResult, BoundParams, Matrix, ParamId, ParamSet, Tape, Var, SOFTPLUS_FLOOR};
use crate::episode::{Episode, Examples, Targets};
use crate::expfam::{FactorizedGaussian, NoisyObservation, TrackedGaussian};

/// Generic variant: the learner maps each `(x, y)` to a noisy observation
/// of a global latent `z`; the model decodes predictions from `x` and `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct GenericNet {
    task: TaskKind,
    x_dim: usize,
    y_in: usize,
    z_dim: usize,
    num_classes: usize,
    learner: Mlp,
    prior_mu: ParamId,
    prior_raw: ParamId,
    encoder: Option<Mlp>,
    decoder: Mlp,
    noise_raw: Option<ParamId>,
}

impl GenericNet {
    pub(super) fn new<R: Rng>(cfg: &ModelConfig, params: &mut ParamSet, rng: &mut R) -> Self {
        let task = TaskKind::of(cfg.domain);
        let x_dim = cfg.domain.x_dim();
        let d = cfg.z_dim;
        let y_in = match task {
            TaskKind::Regression => 1,
            TaskKind::Classification => cfg.num_classes,
            TaskKind::Density => 0,
        };
        let learner = Mlp::new(params, "learner", &layer_sizes(x_dim + y_in, cfg.hidden, cfg.layers, 2 * d), rng);
        let prior_mu = params.push("prior.mu", Matrix::zeros(1, d));
        let prior_raw = params.push("prior.raw_precision", Matrix::filled(1, d, inverse_softplus_f64(1.0 - SOFTPLUS_FLOOR)));
        let (encoder, decoder, noise_raw) = match task {
            TaskKind::Density => {
                let dec = Mlp::new(params, "decoder", &layer_sizes(d, cfg.hidden, cfg.layers, 2 * x_dim), rng);
                (None, dec, None)
            }
            _ => {
                let out = if task == TaskKind::Regression { 1 } else { cfg.num_classes };
                let enc = Mlp::new(params, "encoder", &layer_sizes(x_dim, cfg.hidden, cfg.layers, cfg.hidden), rng);
                let dec = Mlp::new(params, "decoder", &layer_sizes(cfg.hidden + d, cfg.hidden, 1, out), rng);
                let noise = (task == TaskKind::Regression)
                    .then(|| params.push("likelihood.raw_var", Matrix::scalar(inverse_softplus_f64(1.0))));
                (Some(enc), dec, noise)
            }
        };
        GenericNet { task, x_dim, y_in, z_dim: d, num_classes: cfg.num_classes, learner, prior_mu, prior_raw, encoder, decoder, noise_raw }
    }

    pub(super) fn prior_value(&self, params: &ParamSet) -> FactorizedGaussian {
        let mu = params.get(self.prior_mu).data().to_vec();
        let lambda = params.get(self.prior_raw).data().iter().map(|&r| softplus_f64(r) + SOFTPLUS_FLOOR).collect();
        FactorizedGaussian::new(mu, lambda).expect("prior parameters are finite")
    }

    fn prior(&self, tape: &mut Tape, bound: &BoundParams) -> TrackedGaussian {
        let lambda = tape.positive(bound.var(self.prior_raw));
        TrackedGaussian { mu: bound.var(self.prior_mu), lambda }
    }

    /// Learner input rows: `[x, encode(y)]`.
    fn learner_input(&self, ex: &Examples) -> ModelResult<Matrix> {
        let enc = match (&ex.y, self.task) {
            (Targets::Real(y), TaskKind::Regression) => y.clone(),
            (Targets::Labels(l), TaskKind::Classification) => onehot(l, self.num_classes)?,
            (_, TaskKind::Density) => Matrix::zeros(ex.len(), 0),
            _ => return Err(super::ModelError::InvalidConfig("targets do not match the task".into())),
        };
        let mut data = Vec::with_capacity(ex.len() * (self.x_dim + self.y_in));
        for r in 0..ex.len() {
            data.extend_from_slice(ex.x.row_slice(r));
            data.extend_from_slice(enc.row_slice(r));
        }
        Ok(Matrix::from_vec(ex.len(), self.x_dim + self.y_in, data))
    }

    /// `(z_hat, precision)`, each `T x D`.
    fn observations(&self, tape: &mut Tape, bound: &BoundParams, input: &Matrix) -> AdResult<(Var, Var)> {
        let x = tape.constant(input.clone());
        let out = self.learner.forward(tape, bound, x)?;
        let z_hat = tape.slice_cols(out, 0..self.z_dim)?;
        let raw = tape.slice_cols(out, self.z_dim..2 * self.z_dim)?;
        Ok((z_hat, tape.positive(raw)))
    }

    /// Decoder outputs for every latent row of `z` (`S x D`).
    /// Supervised tasks give `(S * M) x out` with sample-major rows; density gives `S x 2 d_x`.
    fn decode(&self, tape: &mut Tape, bound: &BoundParams, x: &Matrix, z: Var) -> AdResult<Var> {
        let s = tape.shape(z).0;
        let Some(encoder) = &self.encoder else {
            return self.decoder.forward(tape, bound, z);
        };
        let m = x.rows();
        let xv = tape.constant(x.clone());
        let h = encoder.forward(tape, bound, xv)?;
        let h_rep = tape.concat_rows(&vec![h; s])?;
        let mut parts = Vec::with_capacity(s);
        for i in 0..s {
            let row = tape.slice_rows(z, i..i + 1)?;
            parts.push(tape.broadcast_rows(row, m)?);
        }
        let z_rep = tape.concat_rows(&parts)?;
        let input = tape.concat_cols(&[h_rep, z_rep])?;
        self.decoder.forward(tape, bound, input)
    }

    fn noise_var(&self, tape: &mut Tape, bound: &BoundParams) -> Option<Var> {
        self.noise_raw.map(|id| tape.positive(bound.var(id)))
    }

    /// Log-likelihood of each row of `ex` under each latent sample, `(S * M) x 1`.
    fn log_lik_rows(&self, tape: &mut Tape, bound: &BoundParams, ex: &Examples, z: Var) -> ModelResult<Var> {
        let s = tape.shape(z).0;
        let m = ex.len();
        let out = self.decode(tape, bound, &ex.x, z)?;
        let ll = match (self.task, &ex.y) {
            (TaskKind::Regression, Targets::Real(y)) => {
                let var = self.noise_var(tape, bound).expect("regression head has a noise parameter");
                let var = tape.broadcast_rows(var, s * m)?;
                let y_rep = tape.constant(repeat_rows(y, s));
                gaussian_ll_rows(tape, y_rep, out, var)?
            }
            (TaskKind::Classification, Targets::Labels(labels)) => {
                let logp = tape.log_softmax_rows(out);
                let mask = tape.constant(repeat_rows(&onehot(labels, self.num_classes)?, s));
                let picked = tape.mul(logp, mask)?;
                tape.sum_cols(picked)
            }
            (TaskKind::Density, _) => {
                let mean = tape.slice_cols(out, 0..self.x_dim)?;
                let raw = tape.slice_cols(out, self.x_dim..2 * self.x_dim)?;
                let var = tape.positive(raw);
                let mut means = Vec::with_capacity(s);
                let mut vars = Vec::with_capacity(s);
                for i in 0..s {
                    let mr = tape.slice_rows(mean, i..i + 1)?;
                    means.push(tape.broadcast_rows(mr, m)?);
                    let vr = tape.slice_rows(var, i..i + 1)?;
                    vars.push(tape.broadcast_rows(vr, m)?);
                }
                let mean_rep = tape.concat_rows(&means)?;
                let var_rep = tape.concat_rows(&vars)?;
                let x_rep = tape.constant(repeat_rows(&ex.x, s));
                gaussian_ll_rows(tape, x_rep, mean_rep, var_rep)?
            }
            _ => return Err(super::ModelError::InvalidConfig("targets do not match the task".into())),
        };
        Ok(ll)
    }

    pub(super) fn record_loss(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        episode: &Episode,
        eps: &Matrix,
    ) -> ModelResult<(Var, EpisodeLossReport)> {
        let s = eps.rows();
        if s == 0 || eps.cols() != self.z_dim {
            return Err(super::ModelError::InvalidConfig(format!("eps must be n_z x {} with n_z >= 1", self.z_dim)));
        }
        let input = self.learner_input(&episode.train)?;
        let (z_hat, prec) = self.observations(tape, bound, &input)?;
        let prior = self.prior(tape, bound);
        let post = prior.batch_update(tape, z_hat, prec)?;
        let z = post.reparam(tape, eps)?;

        let t = episode.train.len();
        let all = concat_examples(&episode.train, &episode.test);
        let m = all.len();
        let ll = self.log_lik_rows(tape, bound, &all, z)?;
        let mut w_train = Matrix::zeros(1, s * m);
        let mut w_test = Matrix::zeros(1, s * m);
        for i in 0..s {
            for r in 0..m {
                let w = if r < t { &mut w_train } else { &mut w_test };
                w.set(0, i * m + r, -1.0 / s as f64);
            }
        }
        let w_train = tape.constant(w_train);
        let w_test = tape.constant(w_test);
        let nll_train = tape.matmul(w_train, ll)?;
        let nll_test = tape.matmul(w_test, ll)?;
        let kl = post.kl_to_unit(tape)?;
        let nll = tape.add(nll_train, nll_test)?;
        let loss = tape.add(nll, kl)?;

        let report = EpisodeLossReport {
            elbo: -tape.value(loss).item(),
            nll_train: tape.value(nll_train).item(),
            nll_test: tape.value(nll_test).item(),
            kl: tape.value(kl).item(),
            z_samples: tape.value(z).clone(),
        };
        Ok((loss, report))
    }

    pub(super) fn learn_stream(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        train: &Examples,
        path: StreamPath,
    ) -> ModelResult<FactorizedGaussian> {
        let prior = {
            let p = self.prior(tape, bound);
            p.to_value(tape)
        };
        let input = self.learner_input(train)?;
        match path {
            StreamPath::Batch => {
                let (z_hat, prec) = self.observations(tape, bound, &input)?;
                let obs = to_observations(tape.value(z_hat), tape.value(prec))?;
                Ok(prior.batch_update(&obs)?)
            }
            StreamPath::Sequential => {
                let mut post = prior;
                for r in 0..input.rows() {
                    let row = Matrix::row(input.row_slice(r));
                    let (z_hat, prec) = self.observations(tape, bound, &row)?;
                    let obs = NoisyObservation::new(tape.value(z_hat).data().to_vec(), tape.value(prec).data().to_vec())?;
                    post = post.seq_update(&obs)?;
                }
                Ok(post)
            }
        }
    }

    pub(super) fn predict_with_z(&self, tape: &mut Tape, bound: &BoundParams, x: &Matrix, z: &Matrix) -> ModelResult<Prediction> {
        if z.cols() != self.z_dim || z.rows() == 0 {
            return Err(super::ModelError::InvalidConfig(format!("latent rows must have width {}", self.z_dim)));
        }
        let s = z.rows();
        let m = x.rows();
        let zv = tape.constant(z.clone());
        let out = self.decode(tape, bound, x, zv)?;
        let out_val = tape.value(out).clone();
        let pred = match self.task {
            TaskKind::Regression => {
                let var = self.noise_var(tape, bound).expect("regression head has a noise parameter");
                let v = tape.value(var).item();
                let means = (0..s).map(|i| slice_rows(&out_val, i * m..(i + 1) * m)).collect();
                let vars = (0..s).map(|_| Matrix::filled(m, 1, v)).collect();
                Prediction::Regression { means, vars }
            }
            TaskKind::Classification => {
                let mut probs = Matrix::zeros(m, self.num_classes);
                for i in 0..s {
                    probs.add_assign(&super::softmax_rows(&slice_rows(&out_val, i * m..(i + 1) * m)));
                }
                Prediction::Classification { probs: probs.scale(1.0 / s as f64) }
            }
            TaskKind::Density => {
                let d = self.x_dim;
                let means = (0..s).map(|i| Matrix::row(&out_val.row_slice(i)[..d])).collect();
                let vars = (0..s)
                    .map(|i| Matrix::row(&out_val.row_slice(i)[d..].iter().map(|&r| softplus_f64(r) + SOFTPLUS_FLOOR).collect::<Vec<_>>()))
                    .collect();
                Prediction::Density { means, vars }
            }
        };
        Ok(pred)
    }
}

fn to_observations(z_hat: &Matrix, prec: &Matrix) -> ModelResult<Vec<NoisyObservation>> {
    (0..z_hat.rows())
        .map(|r| Ok(NoisyObservation::new(z_hat.row_slice(r).to_vec(), prec.row_slice(r).to_vec())?))
        .collect()
}

fn slice_rows(m: &Matrix, range: std::ops::Range<usize>) -> Matrix {
    let c = m.cols();
    Matrix::from_vec(range.len(), c, m.data()[range.start * c..range.end * c].to_vec())
}

fn repeat_rows(m: &Matrix, times: usize) -> Matrix {
    let mut data = Vec::with_capacity(m.len() * times);
    for _ in 0..times {
        data.extend_from_slice(m.data());
    }
    Matrix::from_vec(m.rows() * times, m.cols(), data)
}

fn concat_examples(a: &Examples, b: &Examples) -> Examples {
    let mut x = a.x.data().to_vec();
    x.extend_from_slice(b.x.data());
    let y = match (&a.y, &b.y) {
        (Targets::Real(ya), Targets::Real(yb)) => {
            let mut d = ya.data().to_vec();
            d.extend_from_slice(yb.data());
            Targets::Real(Matrix::from_vec(ya.rows() + yb.rows(), ya.cols(), d))
        }
        (Targets::Labels(la), Targets::Labels(lb)) => Targets::Labels(la.iter().chain(lb).copied().collect()),
        _ => Targets::None,
    };
    Examples {
        x: Matrix::from_vec(a.len() + b.len(), a.x.cols(), x),
        y,
        tasks: a.tasks.iter().chain(&b.tasks).copied().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{HeadKind, SbmclModel};
    use super::*;
    use crate::episode::{gen_episode, Domain, EpisodeId, Split, StreamSpec};

    fn model(domain: Domain) -> SbmclModel {
        let mut cfg = ModelConfig::new(HeadKind::Generic, domain);
        cfg.z_dim = 3;
        cfg.hidden = 8;
        cfg.layers = 1;
        cfg.num_classes = 4;
        SbmclModel::new(cfg, 5).unwrap()
    }

    #[test]
    fn sequential_and_batch_streams_agree() {
        for domain in [Domain::Sine, Domain::SynthClassify, Domain::SynthDensity] {
            let m = model(domain);
            let ep = gen_episode(&StreamSpec::new(domain, 3, 4, 11), EpisodeId::new(Split::MetaTrain, 2)).unwrap();
            let seq = m.learn_stream(&ep.train, StreamPath::Sequential).unwrap();
            let batch = m.learn_stream(&ep.train, StreamPath::Batch).unwrap();
            let (super::super::Posterior::Gaussian(a), super::super::Posterior::Gaussian(b)) = (seq, batch) else { panic!() };
            for (x, y) in a.mu().iter().zip(b.mu()).chain(a.lambda().iter().zip(b.lambda())) {
                assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()), "{domain:?}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn elbo_terms_are_consistent() {
        let m = model(Domain::Sine);
        let ep = gen_episode(&StreamSpec::new(Domain::Sine, 2, 3, 1), EpisodeId::new(Split::MetaTrain, 0)).unwrap();
        let eps = Matrix::zeros(1, 3);
        let r = m.elbo_with_eps(&ep, &eps).unwrap();
        assert!(r.kl >= 0.0);
        assert!((r.elbo + r.nll_train + r.nll_test + r.kl).abs() < 1e-9);
        let post = m.learn_stream(&ep.train, StreamPath::Batch).unwrap();
        let super::super::Posterior::Gaussian(g) = post else { panic!() };
        assert!((r.kl - g.kl_to(&FactorizedGaussian::unit(3)).unwrap()).abs() < 1e-9);
        for (a, b) in r.z_samples.data().iter().zip(g.mu()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_stream_returns_prior() {
        let m = model(Domain::SynthDensity);
        let ep = gen_episode(&StreamSpec::new(Domain::SynthDensity, 1, 1, 1), EpisodeId::new(Split::MetaTrain, 0)).unwrap();
        let empty = ep.train.range(0..0);
        let super::super::Posterior::Gaussian(g) = m.learn_stream(&empty, StreamPath::Sequential).unwrap() else { panic!() };
        assert_eq!(g, m.prior().unwrap());
    }
}
