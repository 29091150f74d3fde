//! Meta-training, meta-evaluation, generalization sweeps and the
//! online/offline reference baselines.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, AdError, Matrix, ParamSet, Tape};
use crate::episode::{stream_rng, Domain, Episode, EpisodeError, EpisodeSource, Examples, Split, StreamSpec, Targets};
use crate::models::mlp_layer_sizes;
use crate::models::{
    gaussian_ll_rows, onehot, HeadKind, Mlp, ModelConfig, ModelError, PredictMode, Prediction, SbmclModel, StreamPath, TaskKind,
};

// Tags mixed into the seed so each consumer of randomness gets its own streams.
const TAG_EPS: u64 = 0x6570_735f_6d65_7461;
const TAG_EVAL: u64 = 0x6576_616c_5f72_6e67;
const TAG_BASELINE: u64 = 0x6261_7365_6c69_6e65;

/// Default number of meta-test episodes per evaluation.
pub const DEFAULT_EVAL_EPISODES: u64 = 512;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type HarnessResult<T> = Result<T, HarnessError>;

/// Everything that determines a meta-training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub model: ModelConfig,
    pub num_tasks: usize,
    pub shots: usize,
    pub test_per_task: usize,
    pub n_z: usize,
    pub meta_batch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Size of the meta-training set; step `s` draws episodes `s * meta_batch ..` modulo this.
    pub train_episodes: u64,
    pub eval_episodes: u64,
    /// Seeds the episode generators, the initial weights and all sampling noise.
    pub seed: u64,
}

impl MetaConfig {
    pub fn new(head: HeadKind, domain: Domain) -> Self {
        MetaConfig {
            model: ModelConfig::new(head, domain),
            num_tasks: 10,
            shots: 10,
            test_per_task: 5,
            n_z: 5,
            meta_batch: 8,
            lr: 1e-3,
            steps: 20_000,
            train_episodes: 1 << 32,
            eval_episodes: DEFAULT_EVAL_EPISODES,
            seed: 0,
        }
    }

    pub fn stream_spec(&self) -> StreamSpec {
        StreamSpec {
            num_tasks: self.num_tasks,
            shots: self.shots,
            test_per_task: self.test_per_task,
            seed: self.seed,
            domain: self.model.domain,
        }
    }

    pub fn validate(&self) -> HarnessResult<()> {
        self.model.validate()?;
        self.stream_spec().validate()?;
        if self.n_z == 0 || self.meta_batch == 0 || self.train_episodes == 0 || self.eval_episodes == 0 {
            return Err(HarnessError::InvalidConfig("n_z, meta_batch, train_episodes and eval_episodes must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(HarnessError::InvalidConfig("lr must be a finite non-negative number".into()));
        }
        if self.model.head == HeadKind::Generic
            && self.model.domain == Domain::SynthClassify
            && self.model.num_classes < self.num_tasks
        {
            return Err(HarnessError::InvalidConfig(format!(
                "num_classes ({}) must be at least num_tasks ({})",
                self.model.num_classes, self.num_tasks
            )));
        }
        Ok(())
    }

    pub fn train_source(&self) -> EpisodeSource {
        EpisodeSource::new(self.stream_spec(), Split::MetaTrain, self.train_episodes)
    }

    /// Meta-test episodes for a `(K, shots)` setting.
    pub fn test_source(&self, num_tasks: usize, shots: usize, episodes: u64) -> EpisodeSource {
        EpisodeSource::new(self.stream_spec().with_grid(num_tasks, shots), Split::MetaTest, episodes)
    }
}

/// Trained parameters plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: MetaConfig,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn init(config: MetaConfig) -> HarnessResult<Self> {
        config.validate()?;
        let model = SbmclModel::new(config.model, config.seed)?;
        Ok(Checkpoint { config, params: model.params().clone() })
    }

    pub fn model(&self) -> HarnessResult<SbmclModel> {
        Ok(SbmclModel::from_params(self.config.model, self.params.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean meta-batch loss before each update.
    pub curve: Vec<f64>,
}

/// Runs `config.steps` meta-updates from the seeded initialization.
pub fn meta_train(config: &MetaConfig) -> HarnessResult<TrainOutcome> {
    meta_train_with(config, |_, _| {})
}

/// [`meta_train`] with a callback receiving `(step, loss)` after every step.
pub fn meta_train_with(config: &MetaConfig, mut on_step: impl FnMut(usize, f64)) -> HarnessResult<TrainOutcome> {
    let mut ckpt = Checkpoint::init(*config)?;
    let mut model = ckpt.model()?;
    let source = config.train_source();
    let mut adam = Adam::new(config.lr, model.params().shapes());
    let mut curve = Vec::with_capacity(config.steps);
    let b = config.meta_batch as u64;

    for step in 0..config.steps {
        let results: Vec<HarnessResult<(f64, Vec<Matrix>)>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let index = step as u64 * b + i;
                let episode = source.episode(index)?;
                let mut rng = stream_rng(config.seed ^ TAG_EPS, index);
                let eps = model.draw_eps(config.n_z, &mut rng);
                let (report, grads) = model.loss_and_grads(&episode, &eps).map_err(|e| match e {
                    ModelError::NonFinite(what) => HarnessError::Diverged { step, reason: format!("non-finite {what}") },
                    ModelError::Autodiff(AdError::NotPositiveDefinite { op }) => {
                        HarnessError::Diverged { step, reason: format!("{op} lost positive definiteness") }
                    }
                    other => other.into(),
                })?;
                Ok((report.loss(), grads))
            })
            .collect();

        let mut total = 0.0;
        let mut sum: Option<Vec<Matrix>> = None;
        for r in results {
            let (loss, grads) = r?;
            total += loss;
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        let loss = total / b as f64;
        let grads: Vec<Matrix> = sum.unwrap_or_default().into_iter().map(|g| g.scale(1.0 / b as f64)).collect();
        if !loss.is_finite() || !grads.iter().all(Matrix::is_finite) {
            return Err(HarnessError::Diverged { step, reason: format!("loss {loss}") });
        }
        curve.push(loss);
        adam.step(model.params_mut().values_mut(), &grads)?;
        if !model.params().values().iter().all(Matrix::is_finite) {
            return Err(HarnessError::Diverged { step, reason: "non-finite parameters".into() });
        }
        on_step(step, loss);
    }
    ckpt.params = model.params().clone();
    Ok(TrainOutcome { checkpoint: ckpt, curve })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ErrorRate,
    Mse,
    Nll,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::ErrorRate => "error_rate",
            Metric::Mse => "mse",
            Metric::Nll => "nll",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        match s {
            "error_rate" => Some(Metric::ErrorRate),
            "mse" => Some(Metric::Mse),
            "nll" => Some(Metric::Nll),
            _ => None,
        }
    }

    /// Headline metric for a domain.
    pub fn for_domain(domain: Domain) -> Metric {
        match TaskKind::of(domain) {
            TaskKind::Regression => Metric::Mse,
            TaskKind::Classification => Metric::ErrorRate,
            TaskKind::Density => Metric::Nll,
        }
    }
}

/// Aggregate of one metric over evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Head name for model rows, `online` / `offline` for baselines.
    pub head: String,
    pub num_tasks: usize,
    pub shots: usize,
    pub metric: Metric,
    pub mean: f64,
    /// Sample standard deviation across episodes (0 for a single episode).
    pub std: f64,
    pub n: usize,
    pub seed: u64,
}

impl MetricsRow {
    pub fn from_values(head: &str, spec: &StreamSpec, metric: Metric, values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MetricsRow { head: head.to_string(), num_tasks: spec.num_tasks, shots: spec.shots, metric, mean, std, n, seed: spec.seed }
    }
}

pub const CSV_HEADER: &str = "head,K,shots,metric,mean,std,n,seed";

/// Rows as CSV with [`CSV_HEADER`]; floats use the shortest round-trip representation.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{:?},{:?},{},{}", r.head, r.num_tasks, r.shots, r.metric.name(), r.mean, r.std, r.n, r.seed);
    }
    out
}

/// Parses CSV written by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(format!("expected header `{CSV_HEADER}`"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(format!("line {}: expected 8 fields, got {}", i + 2, f.len()));
            }
            let bad = |what: &str| format!("line {}: bad {what}", i + 2);
            Ok(MetricsRow {
                head: f[0].to_string(),
                num_tasks: f[1].parse().map_err(|_| bad("K"))?,
                shots: f[2].parse().map_err(|_| bad("shots"))?,
                metric: Metric::parse(f[3]).ok_or_else(|| bad("metric"))?,
                mean: f[4].parse().map_err(|_| bad("mean"))?,
                std: f[5].parse().map_err(|_| bad("std"))?,
                n: f[6].parse().map_err(|_| bad("n"))?,
                seed: f[7].parse().map_err(|_| bad("seed"))?,
            })
        })
        .collect()
}

/// JSON summary of metric rows.
pub fn metrics_json(rows: &[MetricsRow]) -> String {
    serde_json::to_string_pretty(rows).expect("metrics rows serialize")
}

/// Loss curve as CSV (`step,loss`).
pub fn curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(out, "{i},{l:?}");
    }
    out
}

/// Scores of one evaluated episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeScore {
    /// Headline metric (see [`Metric::for_domain`]).
    pub metric: f64,
    /// Mean negative log predictive density per test example.
    pub nll: f64,
}

pub fn score_prediction(pred: &Prediction, test: &Examples) -> EpisodeScore {
    let ll = pred.log_likelihood(test);
    let nll = -ll.iter().sum::<f64>() / ll.len().max(1) as f64;
    let metric = match (pred, &test.y) {
        (Prediction::Regression { .. }, Targets::Real(y)) => {
            let mean = pred.mean().expect("regression prediction has a mean");
            mean.data().iter().zip(y.data()).map(|(m, t)| (m - t) * (m - t)).sum::<f64>() / y.len().max(1) as f64
        }
        (Prediction::Classification { .. }, Targets::Labels(labels)) => {
            let got = pred.labels().expect("classification prediction has labels");
            got.iter().zip(labels).filter(|(a, b)| a != b).count() as f64 / labels.len().max(1) as f64
        }
        _ => nll,
    };
    EpisodeScore { metric, nll }
}

/// Evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub mode: PredictMode,
    pub path: StreamPath,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { mode: PredictMode::DEFAULT_MC, path: StreamPath::Sequential }
    }
}

/// Digests the training stream and scores the test set of one episode.
pub fn eval_episode(model: &SbmclModel, episode: &Episode, opts: EvalOptions, seed: u64) -> HarnessResult<EpisodeScore> {
    model.check_episode(episode)?;
    let posterior = model.learn_stream(&episode.train, opts.path)?;
    let mut rng = stream_rng(seed ^ TAG_EVAL, episode.id.stream());
    let pred = model.predict(&posterior, &episode.test.x, opts.mode, &mut rng)?;
    Ok(score_prediction(&pred, &episode.test))
}

/// Per-episode scores over a source, in episode order.
pub fn eval_scores(model: &SbmclModel, source: &EpisodeSource, opts: EvalOptions, seed: u64) -> HarnessResult<Vec<EpisodeScore>> {
    (0..source.len())
        .into_par_iter()
        .map(|i| {
            let ep = source.episode(i)?;
            eval_episode(model, &ep, opts, seed)
        })
        .collect()
}

/// Mean headline metric over `n_episodes` meta-test episodes of `(K, shots)`.
pub fn meta_eval(ckpt: &Checkpoint, num_tasks: usize, shots: usize, n_episodes: u64, opts: EvalOptions) -> HarnessResult<MetricsRow> {
    if n_episodes == 0 {
        return Err(HarnessError::InvalidConfig("episode count must be >= 1".into()));
    }
    let model = ckpt.model()?;
    let source = ckpt.config.test_source(num_tasks, shots, n_episodes);
    source.spec().validate()?;
    let scores = eval_scores(&model, &source, opts, ckpt.config.seed)?;
    let values: Vec<f64> = scores.iter().map(|s| s.metric).collect();
    let metric = Metric::for_domain(ckpt.config.model.domain);
    Ok(MetricsRow::from_values(ckpt.config.model.head.name(), source.spec(), metric, &values))
}

/// One row per `(K, shots)` pair, tasks-major in grid order.
pub fn sweep_generalization(
    ckpt: &Checkpoint,
    task_grid: &[usize],
    shot_grid: &[usize],
    n_episodes: u64,
    opts: EvalOptions,
) -> HarnessResult<Vec<MetricsRow>> {
    if task_grid.is_empty() || shot_grid.is_empty() {
        return Err(HarnessError::InvalidConfig("sweep grids must be non-empty".into()));
    }
    let mut rows = Vec::with_capacity(task_grid.len() * shot_grid.len());
    for &k in task_grid {
        for &s in shot_grid {
            rows.push(meta_eval(ckpt, k, s, n_episodes, opts)?);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Online,
    Offline,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Online => "online",
            BaselineKind::Offline => "offline",
        }
    }

    pub fn parse(s: &str) -> Option<BaselineKind> {
        match s {
            "online" => Some(BaselineKind::Online),
            "offline" => Some(BaselineKind::Offline),
            _ => None,
        }
    }
}

/// Plain network trained from scratch on each episode's stream.
///
/// The network is the model trunk without the learner: an MLP from `x` to
/// the prediction (regression value or class logits), trained with Adam on
/// squared error or cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub hidden: usize,
    pub layers: usize,
    pub lr: f64,
    /// Offline step cap.
    pub max_steps: usize,
    pub minibatch: usize,
    /// Offline evaluation interval for the best-so-far test metric.
    pub eval_every: usize,
}

impl BaselineConfig {
    pub fn online() -> Self {
        BaselineConfig { kind: BaselineKind::Online, hidden: 64, layers: 3, lr: 1e-2, max_steps: 0, minibatch: 1, eval_every: 1 }
    }

    pub fn offline() -> Self {
        BaselineConfig { kind: BaselineKind::Offline, hidden: 64, layers: 3, lr: 1e-3, max_steps: 2000, minibatch: 16, eval_every: 10 }
    }

    pub fn of(kind: BaselineKind) -> Self {
        match kind {
            BaselineKind::Online => Self::online(),
            BaselineKind::Offline => Self::offline(),
        }
    }
}

struct BaselineNet {
    params: ParamSet,
    mlp: Mlp,
    task: TaskKind,
    classes: usize,
}

impl BaselineNet {
    fn new<R: Rng>(spec: &StreamSpec, cfg: &BaselineConfig, rng: &mut R) -> HarnessResult<Self> {
        let task = TaskKind::of(spec.domain);
        let out = match task {
            TaskKind::Regression => 1,
            TaskKind::Classification => spec.num_tasks,
            TaskKind::Density => {
                return Err(HarnessError::InvalidConfig("baselines need a supervised domain".into()));
            }
        };
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, "baseline", &mlp_layer_sizes(spec.domain.x_dim(), cfg.hidden, cfg.layers, out), rng);
        Ok(BaselineNet { params, mlp, task, classes: spec.num_tasks })
    }

    fn forward(&self, x: &Matrix) -> HarnessResult<Matrix> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.mlp.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }

    fn grads(&self, ex: &Examples) -> HarnessResult<Vec<Matrix>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let xv = tape.constant(ex.x.clone());
        let out = self.mlp.forward(&mut tape, &bound, xv)?;
        let per_row = match (&ex.y, self.task) {
            (Targets::Real(y), TaskKind::Regression) => {
                let y = tape.constant(y.clone());
                let unit = tape.constant(Matrix::filled(ex.len(), 1, 1.0));
                let ll = gaussian_ll_rows(&mut tape, y, out, unit)?;
                tape.scale(ll, 2.0)
            }
            (Targets::Labels(l), TaskKind::Classification) => {
                let logp = tape.log_softmax_rows(out);
                let mask = tape.constant(onehot(l, self.classes)?);
                let picked = tape.mul(logp, mask)?;
                tape.sum_cols(picked)
            }
            _ => return Err(HarnessError::InvalidConfig("targets do not match the task".into())),
        };
        let mean = tape.mean(per_row);
        let loss = tape.neg(mean);
        let mut g = tape.backward(loss)?;
        Ok(bound.vars().iter().map(|&v| g.take(v)).collect())
    }

    fn metric(&self, test: &Examples) -> HarnessResult<f64> {
        let out = self.forward(&test.x)?;
        Ok(match &test.y {
            Targets::Real(y) => out.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len().max(1) as f64,
            Targets::Labels(l) => {
                let pred = Prediction::Classification { probs: out }.labels().expect("classification");
                pred.iter().zip(l).filter(|(a, b)| a != b).count() as f64 / l.len().max(1) as f64
            }
            Targets::None => f64::NAN,
        })
    }
}

/// Headline test metric of a baseline network trained on one episode.
pub fn baseline_episode(episode: &Episode, cfg: &BaselineConfig, seed: u64) -> HarnessResult<f64> {
    let mut rng = stream_rng(seed ^ TAG_BASELINE, episode.id.stream());
    let mut net = BaselineNet::new(&episode.spec, cfg, &mut rng)?;
    let mut adam = Adam::new(cfg.lr, net.params.shapes());
    let t = episode.train.len();
    match cfg.kind {
        BaselineKind::Online => {
            let mut order: Vec<usize> = (0..t).collect();
            order.shuffle(&mut rng);
            for &i in &order {
                let g = net.grads(&episode.train.select(&[i]))?;
                adam.step(net.params.values_mut(), &g)?;
            }
            net.metric(&episode.test)
        }
        BaselineKind::Offline => {
            let mut best = net.metric(&episode.test)?;
            for step in 1..=cfg.max_steps {
                let idx: Vec<usize> = (0..cfg.minibatch.max(1)).map(|_| rng.random_range(0..t)).collect();
                let g = net.grads(&episode.train.select(&idx))?;
                adam.step(net.params.values_mut(), &g)?;
                if step % cfg.eval_every.max(1) == 0 || step == cfg.max_steps {
                    let m = net.metric(&episode.test)?;
                    if m < best {
                        best = m;
                    }
                }
            }
            Ok(best)
        }
    }
}

/// Baseline metric over meta-test episodes of `spec`.
pub fn run_baseline(spec: &StreamSpec, n_episodes: u64, cfg: &BaselineConfig) -> HarnessResult<MetricsRow> {
    if n_episodes == 0 {
        return Err(HarnessError::InvalidConfig("episode count must be >= 1".into()));
    }
    spec.validate()?;
    let source = EpisodeSource::new(*spec, Split::MetaTest, n_episodes);
    let values: Vec<f64> = (0..n_episodes)
        .into_par_iter()
        .map(|i| baseline_episode(&source.episode(i)?, cfg, spec.seed))
        .collect::<HarnessResult<_>>()?;
    Ok(MetricsRow::from_values(cfg.kind.name(), spec, Metric::for_domain(spec.domain), &values))
}

pub fn baseline_online(spec: &StreamSpec, n_episodes: u64) -> HarnessResult<MetricsRow> {
    run_baseline(spec, n_episodes, &BaselineConfig::online())
}

pub fn baseline_offline(spec: &StreamSpec, n_episodes: u64) -> HarnessResult<MetricsRow> {
    run_baseline(spec, n_episodes, &BaselineConfig::offline())
}
