//! Learner and model networks for the generic variant and the special-case heads.
//!
//! Every head follows the same pattern: a network digests the training
//! stream into an exponential-family posterior, and predictions on test
//! inputs are conditioned on that posterior.
//!
//! | head      | posterior                          | task           |
//! |-----------|------------------------------------|----------------|
//! | `generic` | [`FactorizedGaussian`] over `z`    | any domain     |
//! | `gemcl`   | [`ClasswiseGaussianBank`]          | classification |
//! | `pn`      | bank with isotropic unit noise     | classification |
//! | `alpaca`  | [`MatrixNormalState`]              | regression     |
//!
//! ELBO sign convention: `elbo = -(nll_test + nll_train) - kl`, and the
//! meta-training loss is `-elbo`. For the analytic heads (`gemcl`, `pn`,
//! `alpaca`) the loss is the negative posterior-predictive log-likelihood
//! of the test set and `kl`, `nll_train` are reported as zero.

mod alpaca;
mod bank_head;
mod generic;
mod mlp;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, BoundParams, Gradients, Matrix, ParamSet, Tape, Var};
use crate::episode::{Domain, Episode, Examples, Targets};
use crate::expfam::{ClasswiseGaussianBank, FactorizedGaussian, MatrixNormalState, PosteriorError};

pub use mlp::Mlp;
pub(crate) use mlp::layer_sizes as mlp_layer_sizes;

use alpaca::AlpacaNet;
use bank_head::BankNet;
use generic::GenericNet;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error("head `{head}` cannot handle domain `{domain}`")]
    HeadMismatch { head: &'static str, domain: &'static str },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("parameter layout mismatch: {0}")]
    ParamLayout(String),
}

pub type ModelResult<T> = Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Generic,
    Gemcl,
    Pn,
    Alpaca,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Generic => "generic",
            HeadKind::Gemcl => "gemcl",
            HeadKind::Pn => "pn",
            HeadKind::Alpaca => "alpaca",
        }
    }

    pub fn parse(s: &str) -> Option<HeadKind> {
        match s {
            "generic" => Some(HeadKind::Generic),
            "gemcl" => Some(HeadKind::Gemcl),
            "pn" => Some(HeadKind::Pn),
            "alpaca" => Some(HeadKind::Alpaca),
            _ => None,
        }
    }

    pub fn supports(self, domain: Domain) -> bool {
        match self {
            HeadKind::Generic => true,
            HeadKind::Gemcl | HeadKind::Pn => domain == Domain::SynthClassify,
            HeadKind::Alpaca => domain == Domain::Sine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Regression,
    Classification,
    Density,
}

impl TaskKind {
    pub fn of(domain: Domain) -> TaskKind {
        match domain {
            Domain::Sine => TaskKind::Regression,
            Domain::SynthClassify => TaskKind::Classification,
            Domain::SynthDensity => TaskKind::Density,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub head: HeadKind,
    pub domain: Domain,
    /// Dimension of the statistical model: latent `z` (generic), embedding
    /// (gemcl/pn) or feature vector (alpaca).
    pub z_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Output classes of the generic classification head.
    pub num_classes: usize,
    /// Observation noise variance of the alpaca head.
    pub noise_var: f64,
}

impl ModelConfig {
    pub fn new(head: HeadKind, domain: Domain) -> Self {
        ModelConfig { head, domain, z_dim: 32, hidden: 64, layers: 3, num_classes: 10, noise_var: 0.1 }
    }

    pub fn validate(&self) -> ModelResult<()> {
        if !self.head.supports(self.domain) {
            return Err(ModelError::HeadMismatch { head: self.head.name(), domain: self.domain.name() });
        }
        if self.z_dim == 0 || self.hidden == 0 || self.num_classes == 0 {
            return Err(ModelError::InvalidConfig("z_dim, hidden and num_classes must be >= 1".into()));
        }
        if !(self.noise_var > 0.0) || !self.noise_var.is_finite() {
            return Err(ModelError::InvalidConfig("noise_var must be positive".into()));
        }
        Ok(())
    }
}

/// Posterior produced by digesting a training stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Posterior {
    Gaussian(FactorizedGaussian),
    Bank(ClasswiseGaussianBank),
    MatrixNormal(MatrixNormalState),
}

/// How the training stream is folded into the posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPath {
    /// One example at a time with the sequential update rule.
    Sequential,
    /// All examples at once with the batch rule.
    Batch,
}

/// How the latent is handled at prediction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictMode {
    /// Average over this many reparameterized draws.
    MonteCarlo(usize),
    /// Use the posterior mode.
    Map,
}

impl PredictMode {
    pub const DEFAULT_MC: PredictMode = PredictMode::MonteCarlo(5);
}

/// Predictive distribution for a batch of test inputs.
///
/// Monte-Carlo predictions keep one component per draw; densities are
/// averaged in probability space.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    /// Per component: means and variances, each `N x d_y`.
    Regression { means: Vec<Matrix>, vars: Vec<Matrix> },
    /// Class probabilities, `N x C`, already averaged over components.
    Classification { probs: Matrix },
    /// Per component: mean and variance rows (`1 x d_x`) of a diagonal Gaussian over `x`.
    Density { means: Vec<Matrix>, vars: Vec<Matrix> },
}

impl Prediction {
    /// Mixture mean for regression predictions.
    pub fn mean(&self) -> Option<Matrix> {
        match self {
            Prediction::Regression { means, .. } => {
                let mut acc = Matrix::zeros(means[0].rows(), means[0].cols());
                for m in means {
                    acc.add_assign(m);
                }
                Some(acc.scale(1.0 / means.len() as f64))
            }
            _ => None,
        }
    }

    /// Most probable label per query.
    pub fn labels(&self) -> Option<Vec<usize>> {
        match self {
            Prediction::Classification { probs } => Some(
                (0..probs.rows())
                    .map(|r| {
                        let row = probs.row_slice(r);
                        let mut best = 0;
                        for (j, &p) in row.iter().enumerate() {
                            if p > row[best] {
                                best = j;
                            }
                        }
                        best
                    })
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Log predictive density of each test example.
    pub fn log_likelihood(&self, test: &Examples) -> Vec<f64> {
        use crate::expfam::{gaussian_log_density, log_mean_exp};
        match self {
            Prediction::Regression { means, vars } => {
                let Targets::Real(y) = &test.y else { return Vec::new() };
                (0..y.rows())
                    .map(|n| {
                        let logs: Vec<f64> = means
                            .iter()
                            .zip(vars)
                            .map(|(m, v)| gaussian_log_density(y.row_slice(n), m.row_slice(n), v.row_slice(n)))
                            .collect();
                        log_mean_exp(&logs)
                    })
                    .collect()
            }
            Prediction::Classification { probs } => {
                let Targets::Labels(labels) = &test.y else { return Vec::new() };
                labels.iter().enumerate().map(|(n, &l)| probs.get(n, l).ln()).collect()
            }
            Prediction::Density { means, vars } => (0..test.len())
                .map(|n| {
                    let logs: Vec<f64> = means
                        .iter()
                        .zip(vars)
                        .map(|(m, v)| gaussian_log_density(test.x.row_slice(n), m.data(), v.data()))
                        .collect();
                    log_mean_exp(&logs)
                })
                .collect(),
        }
    }
}

/// Per-episode objective terms.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLossReport {
    pub elbo: f64,
    pub nll_train: f64,
    pub nll_test: f64,
    pub kl: f64,
    /// Latent draws used for the likelihood terms (`n_z x D`); empty for analytic heads.
    pub z_samples: Matrix,
}

impl EpisodeLossReport {
    /// Meta-training loss, `-elbo`.
    pub fn loss(&self) -> f64 {
        -self.elbo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Arch {
    Generic(GenericNet),
    Bank(BankNet),
    Alpaca(AlpacaNet),
}

/// A learner/model pair together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmclModel {
    config: ModelConfig,
    params: ParamSet,
    arch: Arch,
}

pub(crate) fn onehot(labels: &[usize], classes: usize) -> ModelResult<Matrix> {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(ModelError::InvalidConfig(format!("label {l} outside 0..{classes}")));
        }
        m.set(i, l, 1.0);
    }
    Ok(m)
}

/// Row-wise Gaussian log-density `-0.5 * sum_j [ln(2 pi v) + (y - m)^2 / v]`, shape `rows x 1`.
pub(crate) fn gaussian_ll_rows(tape: &mut Tape, y: Var, mean: Var, var: Var) -> Result<Var, AdError> {
    let diff = tape.sub(y, mean)?;
    let sq = tape.square(diff);
    let ratio = tape.div(sq, var)?;
    let logv = tape.log(var);
    let s = tape.add(ratio, logv)?;
    let s = tape.add_scalar(s, (2.0 * std::f64::consts::PI).ln());
    let rows = tape.sum_cols(s);
    Ok(tape.scale(rows, -0.5))
}

pub(crate) fn standard_normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect())
}

pub(crate) fn softmax_rows(scores: &Matrix) -> Matrix {
    let mut out = scores.clone();
    let c = scores.cols();
    for r in 0..scores.rows() {
        let row = &mut out.data_mut()[r * c..(r + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

impl SbmclModel {
    /// Freshly initialized model; `seed` fixes the initial weights.
    pub fn new(config: ModelConfig, seed: u64) -> ModelResult<Self> {
        config.validate()?;
        let mut rng = crate::episode::stream_rng(seed, 0x1217);
        let mut params = ParamSet::new();
        let arch = match config.head {
            HeadKind::Generic => Arch::Generic(GenericNet::new(&config, &mut params, &mut rng)),
            HeadKind::Gemcl | HeadKind::Pn => Arch::Bank(BankNet::new(&config, &mut params, &mut rng)),
            HeadKind::Alpaca => Arch::Alpaca(AlpacaNet::new(&config, &mut params, &mut rng)),
        };
        Ok(SbmclModel { config, params, arch })
    }

    /// Rebuilds the architecture for `config` and installs `params`, which
    /// must match the expected names and shapes exactly.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> ModelResult<Self> {
        let mut model = SbmclModel::new(config, 0)?;
        if model.params.names() != params.names() || model.params.shapes() != params.shapes() {
            return Err(ModelError::ParamLayout(format!(
                "expected {} parameters {:?}, got {:?}",
                model.params.len(),
                model.params.names(),
                params.names()
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn task(&self) -> TaskKind {
        TaskKind::of(self.config.domain)
    }

    pub fn check_episode(&self, ep: &Episode) -> ModelResult<()> {
        if ep.spec.domain != self.config.domain {
            return Err(ModelError::HeadMismatch { head: self.config.head.name(), domain: ep.spec.domain.name() });
        }
        Ok(())
    }

    /// Records the training objective of one episode on `tape`.
    ///
    /// `eps` holds the standard-normal draws for the generic head's
    /// reparameterized latent (`n_z x z_dim`); analytic heads ignore it.
    pub fn record_loss(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        episode: &Episode,
        eps: &Matrix,
    ) -> ModelResult<(Var, EpisodeLossReport)> {
        self.check_episode(episode)?;
        let out = match &self.arch {
            Arch::Generic(net) => net.record_loss(tape, bound, episode, eps)?,
            Arch::Bank(net) => net.record_loss(tape, bound, episode)?,
            Arch::Alpaca(net) => net.record_loss(tape, bound, episode)?,
        };
        if !out.1.elbo.is_finite() {
            return Err(ModelError::NonFinite("episode loss"));
        }
        Ok(out)
    }

    /// Draws the latent noise for one episode (`n_z x z_dim`).
    pub fn draw_eps<R: Rng>(&self, n_z: usize, rng: &mut R) -> Matrix {
        match self.arch {
            Arch::Generic(_) => standard_normal_matrix(rng, n_z, self.config.z_dim),
            _ => Matrix::zeros(0, self.config.z_dim),
        }
    }

    /// Loss report and parameter gradients for one episode.
    pub fn loss_and_grads(&self, episode: &Episode, eps: &Matrix) -> ModelResult<(EpisodeLossReport, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let (loss, report) = self.record_loss(&mut tape, &bound, episode, eps)?;
        let mut grads: Gradients = tape.backward(loss)?;
        let g = bound.vars().iter().map(|&v| grads.take(v)).collect();
        Ok((report, g))
    }

    /// Objective terms with explicit latent noise and no gradient tracking.
    pub fn elbo_with_eps(&self, episode: &Episode, eps: &Matrix) -> ModelResult<EpisodeLossReport> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        Ok(self.record_loss(&mut tape, &bound, episode, eps)?.1)
    }

    fn elbo<R: Rng>(&self, episode: &Episode, n_z: usize, rng: &mut R, want: TaskKind) -> ModelResult<EpisodeLossReport> {
        if n_z == 0 {
            return Err(ModelError::InvalidConfig("n_z must be >= 1".into()));
        }
        let task = TaskKind::of(episode.spec.domain);
        let ok = match want {
            TaskKind::Density => task == TaskKind::Density,
            _ => task != TaskKind::Density,
        };
        if !ok {
            return Err(ModelError::HeadMismatch { head: self.config.head.name(), domain: episode.spec.domain.name() });
        }
        let eps = self.draw_eps(n_z, rng);
        self.elbo_with_eps(episode, &eps)
    }

    /// Supervised bound: expected `log p(y|x,z)` over test and training
    /// examples minus `KL(q(z|D) || N(0, I))`.
    pub fn elbo_supervised<R: Rng>(&self, episode: &Episode, n_z: usize, rng: &mut R) -> ModelResult<EpisodeLossReport> {
        self.elbo(episode, n_z, rng, TaskKind::Regression)
    }

    /// Unsupervised bound with `log p(x|z)` likelihoods.
    pub fn elbo_unsupervised<R: Rng>(&self, episode: &Episode, n_z: usize, rng: &mut R) -> ModelResult<EpisodeLossReport> {
        self.elbo(episode, n_z, rng, TaskKind::Density)
    }

    /// Digests a training stream into the head's posterior using forward passes only.
    pub fn learn_stream(&self, train: &Examples, path: StreamPath) -> ModelResult<Posterior> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        match &self.arch {
            Arch::Generic(net) => net.learn_stream(&mut tape, &bound, train, path).map(Posterior::Gaussian),
            Arch::Bank(net) => net.learn_stream(&mut tape, &bound, train, path).map(Posterior::Bank),
            Arch::Alpaca(net) => net.learn_stream(&mut tape, &bound, train, path).map(Posterior::MatrixNormal),
        }
    }

    /// The learnable prior of the generic head's latent.
    pub fn prior(&self) -> Option<FactorizedGaussian> {
        match &self.arch {
            Arch::Generic(net) => Some(net.prior_value(&self.params)),
            _ => None,
        }
    }

    /// Predictive distribution at `x` given a posterior.
    ///
    /// `rng` is only consulted in Monte-Carlo mode. The alpaca head's
    /// predictive is analytic and ignores the mode.
    pub fn predict<R: Rng>(&self, posterior: &Posterior, x: &Matrix, mode: PredictMode, rng: &mut R) -> ModelResult<Prediction> {
        if let PredictMode::MonteCarlo(0) = mode {
            return Err(ModelError::InvalidConfig("Monte-Carlo prediction needs at least one sample".into()));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        match (&self.arch, posterior) {
            (Arch::Generic(net), Posterior::Gaussian(g)) => {
                let z = match mode {
                    PredictMode::Map => Matrix::row(&g.map_point()),
                    PredictMode::MonteCarlo(s) => {
                        let eps = standard_normal_matrix(rng, s, g.dim());
                        let rows: Vec<Vec<f64>> =
                            (0..s).map(|i| g.reparam_sample(eps.row_slice(i))).collect::<Result<_, _>>()?;
                        Matrix::from_rows(&rows)
                    }
                };
                net.predict_with_z(&mut tape, &bound, x, &z)
            }
            (Arch::Generic(net), Posterior::Bank(_)) | (Arch::Generic(net), Posterior::MatrixNormal(_)) => {
                let _ = net;
                Err(ModelError::InvalidConfig("generic head needs a Gaussian posterior".into()))
            }
            (Arch::Bank(net), Posterior::Bank(b)) => net.predict(&mut tape, &bound, b, x, mode, rng),
            (Arch::Alpaca(net), Posterior::MatrixNormal(s)) => net.predict(&mut tape, &bound, s, x),
            _ => Err(ModelError::InvalidConfig("posterior kind does not match the head".into())),
        }
    }

    /// Encoder representation of `x` (`N x z_dim`): the regression features of
    /// the alpaca head or the embeddings of the class-bank heads.
    pub fn features(&self, x: &Matrix) -> ModelResult<Matrix> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let v = match &self.arch {
            Arch::Alpaca(net) => net.features(&mut tape, &bound, x)?,
            Arch::Bank(net) => net.features(&mut tape, &bound, x)?,
            Arch::Generic(_) => return Err(ModelError::InvalidConfig("the generic head has no feature map".into())),
        };
        Ok(tape.value(v).clone())
    }

    /// Predictions at `x` with the latent fixed to each row of `z` (generic head only).
    pub fn predict_with_z(&self, x: &Matrix, z: &Matrix) -> ModelResult<Prediction> {
        let Arch::Generic(net) = &self.arch else {
            return Err(ModelError::InvalidConfig("predict_with_z needs the generic head".into()));
        };
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        net.predict_with_z(&mut tape, &bound, x, z)
    }
}
