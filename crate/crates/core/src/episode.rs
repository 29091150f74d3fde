//! Deterministic synthetic episode generators.
//!
//! An episode's training stream is task-blocked: task `i` occupies stream
//! positions `i * shots .. (i + 1) * shots`. The test set draws
//! `test_per_task` fresh points from every task.
//!
//! Randomness is keyed by `(seed, split, index)`. Each key selects its own
//! ChaCha stream, so episodes are reproducible regardless of generation
//! order, and meta-train and meta-test keys can never coincide.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Matrix;

/// Number of distinct task-identity slots available to sine episodes.
pub const SINE_TASK_SLOTS: usize = 64;
/// Input dimension of synthetic classification episodes.
pub const CLASSIFY_DIM: usize = 16;
/// Hidden width of the fixed observation map used by classification episodes.
const CLASSIFY_MAP_HIDDEN: usize = 32;
/// Within-class latent noise of classification episodes.
pub const CLASSIFY_SIGMA: f64 = 0.3;
/// Data dimension of synthetic density episodes.
pub const DENSITY_DIM: usize = 2;
/// Spread of each density mode around its center.
pub const DENSITY_SPREAD: f64 = 0.2;

pub const SINE_AMPLITUDE: (f64, f64) = (0.1, 5.0);
pub const SINE_PHASE: (f64, f64) = (0.0, PI);
pub const SINE_X: (f64, f64) = (-5.0, 5.0);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EpisodeError {
    #[error("invalid stream spec: {0}")]
    InvalidSpec(String),
    #[error("episode text line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Sine,
    SynthClassify,
    SynthDensity,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Sine => "sine",
            Domain::SynthClassify => "synth-classify",
            Domain::SynthDensity => "synth-density",
        }
    }

    pub fn parse(s: &str) -> Option<Domain> {
        match s {
            "sine" => Some(Domain::Sine),
            "synth-classify" => Some(Domain::SynthClassify),
            "synth-density" => Some(Domain::SynthDensity),
            _ => None,
        }
    }

    pub fn x_dim(self) -> usize {
        match self {
            Domain::Sine => 1 + SINE_TASK_SLOTS,
            Domain::SynthClassify => CLASSIFY_DIM,
            Domain::SynthDensity => DENSITY_DIM,
        }
    }
}

/// Shape of an episode: `num_tasks` tasks, `shots` training examples each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub num_tasks: usize,
    pub shots: usize,
    pub test_per_task: usize,
    pub seed: u64,
    pub domain: Domain,
}

impl StreamSpec {
    pub fn new(domain: Domain, num_tasks: usize, shots: usize, seed: u64) -> Self {
        StreamSpec { num_tasks, shots, test_per_task: 5, seed, domain }
    }

    pub fn validate(&self) -> Result<(), EpisodeError> {
        if self.num_tasks == 0 || self.shots == 0 || self.test_per_task == 0 {
            return Err(EpisodeError::InvalidSpec("num_tasks, shots and test_per_task must be >= 1".into()));
        }
        if self.domain == Domain::Sine && self.num_tasks > SINE_TASK_SLOTS {
            return Err(EpisodeError::InvalidSpec(format!(
                "sine episodes support at most {SINE_TASK_SLOTS} tasks, got {}",
                self.num_tasks
            )));
        }
        Ok(())
    }

    pub fn stream_len(&self) -> usize {
        self.num_tasks * self.shots
    }

    pub fn test_len(&self) -> usize {
        self.num_tasks * self.test_per_task
    }

    pub fn with_grid(&self, num_tasks: usize, shots: usize) -> Self {
        StreamSpec { num_tasks, shots, ..*self }
    }
}

/// Which side of the meta-split an episode belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    MetaTrain,
    MetaTest,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::MetaTrain => "meta-train",
            Split::MetaTest => "meta-test",
        }
    }
}

/// Key of one episode: the split and the index within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EpisodeId {
    pub split: Split,
    pub index: u64,
}

impl EpisodeId {
    pub fn new(split: Split, index: u64) -> Self {
        EpisodeId { split, index }
    }

    /// ChaCha stream id: the top bit encodes the split.
    pub fn stream(&self) -> u64 {
        let tag = match self.split {
            Split::MetaTrain => 0,
            Split::MetaTest => 1u64 << 63,
        };
        tag | (self.index & !(1u64 << 63))
    }
}

/// Per-episode RNG derived from `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Parameters of one task; the latent that generated its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskParams {
    Sine { amplitude: f64, phase: f64, slot: usize },
    Classify { prototype: Vec<f64> },
    Density { center: Vec<f64> },
}

/// Targets of a split of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Real(Matrix),
    Labels(Vec<usize>),
    None,
}

impl Targets {
    pub fn len(&self) -> Option<usize> {
        match self {
            Targets::Real(m) => Some(m.rows()),
            Targets::Labels(l) => Some(l.len()),
            Targets::None => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len().unwrap_or(0) == 0
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Real(m) => {
                let mut data = Vec::with_capacity(idx.len() * m.cols());
                for &i in idx {
                    data.extend_from_slice(m.row_slice(i));
                }
                Targets::Real(Matrix::from_vec(idx.len(), m.cols(), data))
            }
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
            Targets::None => Targets::None,
        }
    }
}

/// A set of examples: inputs (one row each), targets and task ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Examples {
    pub x: Matrix,
    pub y: Targets,
    pub tasks: Vec<usize>,
}

impl Examples {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Examples {
        let mut data = Vec::with_capacity(idx.len() * self.x.cols());
        for &i in idx {
            data.extend_from_slice(self.x.row_slice(i));
        }
        Examples {
            x: Matrix::from_vec(idx.len(), self.x.cols(), data),
            y: self.y.select(idx),
            tasks: idx.iter().map(|&i| self.tasks[i]).collect(),
        }
    }

    pub fn range(&self, range: std::ops::Range<usize>) -> Examples {
        self.select(&range.collect::<Vec<_>>())
    }
}

/// One continual-learning episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub spec: StreamSpec,
    pub id: EpisodeId,
    pub train: Examples,
    pub test: Examples,
    pub task_params: Vec<TaskParams>,
}

impl Episode {
    /// Seeds of the tasks in this episode, unique across splits by construction.
    pub fn task_seeds(&self) -> Vec<u128> {
        (0..self.spec.num_tasks).map(|t| ((self.id.stream() as u128) << 64) | t as u128).collect()
    }

    /// Same episode with the training stream reordered by `perm`.
    pub fn with_train_order(&self, perm: &[usize]) -> Episode {
        Episode { train: self.train.select(perm), ..self.clone() }
    }
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `y = amplitude * sin(x + phase)`.
pub fn sine_target(amplitude: f64, phase: f64, x: f64) -> f64 {
    amplitude * (x + phase).sin()
}

fn sine_row(x: f64, slot: usize) -> Vec<f64> {
    let mut row = vec![0.0; 1 + SINE_TASK_SLOTS];
    row[0] = x;
    row[1 + slot] = 1.0;
    row
}

/// Sine regression episode.
///
/// Inputs are `[x, one-hot(slot)]`, where each task gets a distinct random
/// identity slot; the scalar `x` alone cannot tell tasks apart because all
/// tasks share the same input range.
pub fn gen_sine_episode(spec: &StreamSpec, id: EpisodeId) -> Result<Episode, EpisodeError> {
    if spec.domain != Domain::Sine {
        return Err(EpisodeError::InvalidSpec(format!("expected sine spec, got {}", spec.domain.name())));
    }
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, id.stream());
    let mut slots: Vec<usize> = (0..SINE_TASK_SLOTS).collect();
    slots.shuffle(&mut rng);
    let mut params = Vec::with_capacity(spec.num_tasks);
    for &slot in slots.iter().take(spec.num_tasks) {
        let amplitude = rng.random_range(SINE_AMPLITUDE.0..SINE_AMPLITUDE.1);
        let phase = rng.random_range(SINE_PHASE.0..SINE_PHASE.1);
        params.push((amplitude, phase, slot));
    }
    let draw = |count: usize, rng: &mut ChaCha8Rng| {
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        let mut tasks = Vec::new();
        for (t, &(a, p, slot)) in params.iter().enumerate() {
            for _ in 0..count {
                let x = rng.random_range(SINE_X.0..SINE_X.1);
                rows.push(sine_row(x, slot));
                ys.push(sine_target(a, p, x));
                tasks.push(t);
            }
        }
        Examples {
            x: Matrix::from_rows(&rows),
            y: Targets::Real(Matrix::from_vec(ys.len(), 1, ys)),
            tasks,
        }
    };
    let train = draw(spec.shots, &mut rng);
    let test = draw(spec.test_per_task, &mut rng);
    let task_params = params.iter().map(|&(amplitude, phase, slot)| TaskParams::Sine { amplitude, phase, slot }).collect();
    Ok(Episode { spec: *spec, id, train, test, task_params })
}

/// Fixed nonlinear map applied to classification latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ObservationMap {
    Identity,
    /// `w2 * tanh(w1 * v + b1)`.
    TwoLayer { w1: Matrix, b1: Vec<f64>, w2: Matrix },
}

impl ObservationMap {
    /// The map shared by every episode generated under `seed`.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = stream_rng(seed, u64::MAX >> 1);
        let (d, h) = (CLASSIFY_DIM, CLASSIFY_MAP_HIDDEN);
        let w1 = Matrix::from_vec(d, h, normal_vec(&mut rng, d * h).iter().map(|v| v / (d as f64).sqrt()).collect());
        let b1 = normal_vec(&mut rng, h).iter().map(|v| 0.1 * v).collect();
        let w2 = Matrix::from_vec(h, d, normal_vec(&mut rng, h * d).iter().map(|v| 2.0 * v / (h as f64).sqrt()).collect());
        ObservationMap::TwoLayer { w1, b1, w2 }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            ObservationMap::Identity => v.to_vec(),
            ObservationMap::TwoLayer { w1, b1, w2 } => {
                let hidden = Matrix::row(v).matmul(w1);
                let act: Vec<f64> = hidden.data().iter().zip(b1).map(|(h, b)| (h + b).tanh()).collect();
                Matrix::row(&act).matmul(w2).into_vec()
            }
        }
    }
}

/// Generator for classification episodes: every task is one label category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyGenerator {
    pub sigma: f64,
    pub map: ObservationMap,
}

impl ClassifyGenerator {
    pub fn standard(seed: u64) -> Self {
        ClassifyGenerator { sigma: CLASSIFY_SIGMA, map: ObservationMap::seeded(seed) }
    }

    pub fn generate(&self, spec: &StreamSpec, id: EpisodeId) -> Result<Episode, EpisodeError> {
        if spec.domain != Domain::SynthClassify {
            return Err(EpisodeError::InvalidSpec(format!("expected synth-classify spec, got {}", spec.domain.name())));
        }
        spec.validate()?;
        let mut rng = stream_rng(spec.seed, id.stream());
        let prototypes: Vec<Vec<f64>> = (0..spec.num_tasks).map(|_| normal_vec(&mut rng, CLASSIFY_DIM)).collect();
        let draw = |count: usize, rng: &mut ChaCha8Rng| {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (t, p) in prototypes.iter().enumerate() {
                for _ in 0..count {
                    let latent: Vec<f64> = p.iter().zip(normal_vec(rng, CLASSIFY_DIM)).map(|(p, n)| p + self.sigma * n).collect();
                    rows.push(self.map.apply(&latent));
                    labels.push(t);
                }
            }
            Examples { x: Matrix::from_rows(&rows), tasks: labels.clone(), y: Targets::Labels(labels) }
        };
        let train = draw(spec.shots, &mut rng);
        let test = draw(spec.test_per_task, &mut rng);
        let task_params = prototypes.into_iter().map(|prototype| TaskParams::Classify { prototype }).collect();
        Ok(Episode { spec: *spec, id, train, test, task_params })
    }
}

/// Classification episode with the standard generator for `spec.seed`.
pub fn gen_classify_episode(spec: &StreamSpec, id: EpisodeId) -> Result<Episode, EpisodeError> {
    ClassifyGenerator::standard(spec.seed).generate(spec, id)
}

/// Unsupervised episode: each task is one mode `c + 0.2 n` with `c ~ N(0, I)`.
pub fn gen_density_episode(spec: &StreamSpec, id: EpisodeId) -> Result<Episode, EpisodeError> {
    if spec.domain != Domain::SynthDensity {
        return Err(EpisodeError::InvalidSpec(format!("expected synth-density spec, got {}", spec.domain.name())));
    }
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, id.stream());
    let centers: Vec<Vec<f64>> = (0..spec.num_tasks).map(|_| normal_vec(&mut rng, DENSITY_DIM)).collect();
    let draw = |count: usize, rng: &mut ChaCha8Rng| {
        let mut rows = Vec::new();
        let mut tasks = Vec::new();
        for (t, c) in centers.iter().enumerate() {
            for _ in 0..count {
                rows.push(c.iter().zip(normal_vec(rng, DENSITY_DIM)).map(|(c, n)| c + DENSITY_SPREAD * n).collect());
                tasks.push(t);
            }
        }
        Examples { x: Matrix::from_rows(&rows), y: Targets::None, tasks }
    };
    let train = draw(spec.shots, &mut rng);
    let test = draw(spec.test_per_task, &mut rng);
    let task_params = centers.into_iter().map(|center| TaskParams::Density { center }).collect();
    Ok(Episode { spec: *spec, id, train, test, task_params })
}

/// Dispatches on `spec.domain`.
pub fn gen_episode(spec: &StreamSpec, id: EpisodeId) -> Result<Episode, EpisodeError> {
    match spec.domain {
        Domain::Sine => gen_sine_episode(spec, id),
        Domain::SynthClassify => gen_classify_episode(spec, id),
        Domain::SynthDensity => gen_density_episode(spec, id),
    }
}

/// Deterministic source of episodes for one side of the meta-split.
#[derive(Debug, Clone)]
pub struct EpisodeSource {
    spec: StreamSpec,
    split: Split,
    count: u64,
    classify: Option<ClassifyGenerator>,
}

impl EpisodeSource {
    pub fn new(spec: StreamSpec, split: Split, count: u64) -> Self {
        let classify = (spec.domain == Domain::SynthClassify).then(|| ClassifyGenerator::standard(spec.seed));
        EpisodeSource { spec, split, count, classify }
    }

    pub fn spec(&self) -> &StreamSpec {
        &self.spec
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Episode `index`; indices past `len()` wrap around.
    pub fn episode(&self, index: u64) -> Result<Episode, EpisodeError> {
        let id = EpisodeId::new(self.split, index % self.count.max(1));
        match &self.classify {
            Some(g) => g.generate(&self.spec, id),
            None => gen_episode(&self.spec, id),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Episode, EpisodeError>> + '_ {
        (0..self.count).map(move |i| self.episode(i))
    }
}

/// Meta-train and meta-test sources with disjoint RNG streams.
pub fn meta_split(spec: StreamSpec, n_train: u64, n_test: u64) -> Result<(EpisodeSource, EpisodeSource), EpisodeError> {
    if n_train == 0 || n_test == 0 {
        return Err(EpisodeError::InvalidSpec("episode counts must be >= 1".into()));
    }
    spec.validate()?;
    Ok((EpisodeSource::new(spec, Split::MetaTrain, n_train), EpisodeSource::new(spec, Split::MetaTest, n_test)))
}

// ---- text format -----------------------------------------------------------

const TEXT_MAGIC: &str = "# sbmcl-episode v1";

impl Episode {
    /// Line-oriented text dump: a `key value` header, then one row per
    /// example: `task_id split x... [y...]`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let y_dim = match &self.train.y {
            Targets::Real(m) => m.cols(),
            Targets::Labels(_) => 1,
            Targets::None => 0,
        };
        let y_kind = match &self.train.y {
            Targets::Real(_) => "real",
            Targets::Labels(_) => "label",
            Targets::None => "none",
        };
        writeln!(out, "{TEXT_MAGIC}").unwrap();
        writeln!(out, "domain {}", self.spec.domain.name()).unwrap();
        writeln!(out, "num_tasks {}", self.spec.num_tasks).unwrap();
        writeln!(out, "shots {}", self.spec.shots).unwrap();
        writeln!(out, "test_per_task {}", self.spec.test_per_task).unwrap();
        writeln!(out, "seed {}", self.spec.seed).unwrap();
        writeln!(out, "split {}", self.id.split.name()).unwrap();
        writeln!(out, "index {}", self.id.index).unwrap();
        writeln!(out, "x_dim {}", self.train.x.cols()).unwrap();
        writeln!(out, "y_kind {y_kind}").unwrap();
        writeln!(out, "y_dim {y_dim}").unwrap();
        for (name, ex) in [("train", &self.train), ("test", &self.test)] {
            for i in 0..ex.len() {
                write!(out, "{} {}", ex.tasks[i], name).unwrap();
                for v in ex.x.row_slice(i) {
                    write!(out, " {v:?}").unwrap();
                }
                match &ex.y {
                    Targets::Real(m) => m.row_slice(i).iter().for_each(|v| write!(out, " {v:?}").unwrap()),
                    Targets::Labels(l) => write!(out, " {}", l[i]).unwrap(),
                    Targets::None => {}
                }
                out.push('\n');
            }
        }
        out
    }

    /// Parses [`Episode::to_text`] output. Task parameters are not part of
    /// the format and come back empty.
    pub fn from_text(text: &str) -> Result<Episode, EpisodeError> {
        let err = |line: usize, msg: &str| EpisodeError::Parse { line, msg: msg.to_string() };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == TEXT_MAGIC => {}
            _ => return Err(err(1, "missing header")),
        }
        let mut header = std::collections::HashMap::new();
        for _ in 0..10 {
            let (n, l) = lines.next().ok_or_else(|| err(0, "truncated header"))?;
            let (k, v) = l.split_once(' ').ok_or_else(|| err(n + 1, "expected `key value`"))?;
            header.insert(k.to_string(), (n + 1, v.to_string()));
        }
        let get = |k: &str| header.get(k).ok_or_else(|| err(0, &format!("missing key {k}")));
        let num = |k: &str| -> Result<u64, EpisodeError> {
            let (n, v) = get(k)?;
            v.parse().map_err(|_| err(*n, &format!("bad integer for {k}")))
        };
        let domain = Domain::parse(&get("domain")?.1).ok_or_else(|| err(2, "unknown domain"))?;
        let split = match get("split")?.1.as_str() {
            "meta-train" => Split::MetaTrain,
            "meta-test" => Split::MetaTest,
            _ => return Err(err(get("split")?.0, "unknown split")),
        };
        let spec = StreamSpec {
            num_tasks: num("num_tasks")? as usize,
            shots: num("shots")? as usize,
            test_per_task: num("test_per_task")? as usize,
            seed: num("seed")?,
            domain,
        };
        let id = EpisodeId::new(split, num("index")?);
        let x_dim = num("x_dim")? as usize;
        let y_dim = num("y_dim")? as usize;
        let y_kind = get("y_kind")?.1.clone();

        let mut parts: [(Vec<f64>, Vec<f64>, Vec<usize>); 2] = Default::default();
        for (n, l) in lines {
            let fields: Vec<&str> = l.split_whitespace().collect();
            if fields.len() != 2 + x_dim + y_dim {
                return Err(err(n + 1, "wrong number of fields"));
            }
            let task: usize = fields[0].parse().map_err(|_| err(n + 1, "bad task id"))?;
            let slot = match fields[1] {
                "train" => 0,
                "test" => 1,
                _ => return Err(err(n + 1, "split must be train or test")),
            };
            let vals = fields[2..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| err(n + 1, "bad number")))
                .collect::<Result<Vec<_>, _>>()?;
            parts[slot].0.extend_from_slice(&vals[..x_dim]);
            parts[slot].1.extend_from_slice(&vals[x_dim..]);
            parts[slot].2.push(task);
        }
        let build = |(xs, ys, tasks): (Vec<f64>, Vec<f64>, Vec<usize>)| -> Result<Examples, EpisodeError> {
            let n = tasks.len();
            let y = match y_kind.as_str() {
                "real" => Targets::Real(Matrix::from_vec(n, y_dim, ys)),
                "label" => Targets::Labels(ys.iter().map(|&v| v as usize).collect()),
                "none" => Targets::None,
                _ => return Err(err(0, "unknown y_kind")),
            };
            Ok(Examples { x: Matrix::from_vec(n, x_dim, xs), y, tasks })
        };
        let [train, test] = parts;
        Ok(Episode { spec, id, train: build(train)?, test: build(test)?, task_params: Vec::new() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(i: u64) -> EpisodeId {
        EpisodeId::new(Split::MetaTrain, i)
    }

    #[test]
    fn single_task_single_shot() {
        let spec = StreamSpec::new(Domain::Sine, 1, 1, 3);
        let ep = gen_sine_episode(&spec, id(0)).unwrap();
        assert_eq!(ep.train.len(), 1);
        assert_eq!(ep.test.len(), 5);
    }

    #[test]
    fn sine_value_at_half_pi() {
        assert_eq!(sine_target(1.0, 0.0, PI / 2.0), 1.0);
    }

    #[test]
    fn sine_targets_follow_task_params() {
        let spec = StreamSpec::new(Domain::Sine, 4, 3, 11);
        let ep = gen_sine_episode(&spec, id(2)).unwrap();
        let Targets::Real(y) = &ep.train.y else { panic!() };
        for i in 0..ep.train.len() {
            let TaskParams::Sine { amplitude, phase, slot } = ep.task_params[ep.train.tasks[i]] else { panic!() };
            let x = ep.train.x.get(i, 0);
            assert!((SINE_X.0..SINE_X.1).contains(&x));
            assert!((SINE_AMPLITUDE.0..SINE_AMPLITUDE.1).contains(&amplitude));
            assert!((SINE_PHASE.0..SINE_PHASE.1).contains(&phase));
            assert_eq!(ep.train.x.get(i, 1 + slot), 1.0);
            assert_eq!(y.get(i, 0), sine_target(amplitude, phase, x));
        }
    }

    #[test]
    fn same_key_is_bit_identical() {
        for domain in [Domain::Sine, Domain::SynthClassify, Domain::SynthDensity] {
            let spec = StreamSpec::new(domain, 5, 4, 77);
            assert_eq!(gen_episode(&spec, id(9)).unwrap(), gen_episode(&spec, id(9)).unwrap());
            assert_ne!(gen_episode(&spec, id(9)).unwrap(), gen_episode(&spec, id(10)).unwrap());
        }
    }

    #[test]
    fn stream_is_task_blocked_and_test_covers_all_tasks() {
        for domain in [Domain::Sine, Domain::SynthClassify, Domain::SynthDensity] {
            let spec = StreamSpec::new(domain, 6, 3, 1);
            let ep = gen_episode(&spec, id(0)).unwrap();
            assert_eq!(ep.train.len(), spec.stream_len());
            for (pos, &t) in ep.train.tasks.iter().enumerate() {
                assert_eq!(t, pos / spec.shots);
            }
            for t in 0..spec.num_tasks {
                assert!(ep.test.tasks.contains(&t));
            }
        }
    }

    #[test]
    fn zero_noise_identity_map_reproduces_prototypes() {
        let spec = StreamSpec::new(Domain::SynthClassify, 3, 4, 5);
        let gen = ClassifyGenerator { sigma: 0.0, map: ObservationMap::Identity };
        let ep = gen.generate(&spec, id(0)).unwrap();
        for i in 0..ep.train.len() {
            let TaskParams::Classify { prototype } = &ep.task_params[ep.train.tasks[i]] else { panic!() };
            assert_eq!(ep.train.x.row_slice(i), prototype.as_slice());
        }
        let Targets::Labels(labels) = &ep.train.y else { panic!() };
        assert_eq!(labels, &ep.train.tasks);
    }

    #[test]
    fn density_episodes_have_no_labels() {
        let spec = StreamSpec::new(Domain::SynthDensity, 4, 2, 5);
        let ep = gen_density_episode(&spec, id(0)).unwrap();
        assert_eq!(ep.train.y, Targets::None);
        assert_eq!(ep.test.y, Targets::None);
        let mut seen: Vec<usize> = ep.test.tasks.clone();
        seen.dedup();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn meta_split_streams_are_disjoint() {
        let spec = StreamSpec::new(Domain::Sine, 3, 2, 8);
        let (train, test) = meta_split(spec, 20, 7).unwrap();
        assert_eq!(train.iter().count(), 20);
        assert_eq!(test.iter().count(), 7);
        let train_seeds: std::collections::HashSet<u128> =
            train.iter().flat_map(|e| e.unwrap().task_seeds()).collect();
        for e in test.iter() {
            for s in e.unwrap().task_seeds() {
                assert!(!train_seeds.contains(&s));
            }
        }
        assert_eq!(train.episode(3).unwrap(), train.episode(3).unwrap());
        assert_ne!(train.episode(3).unwrap().test, test.episode(3).unwrap().test);
        assert!(meta_split(spec, 0, 1).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(StreamSpec::new(Domain::Sine, 0, 1, 0).validate().is_err());
        assert!(StreamSpec::new(Domain::Sine, SINE_TASK_SLOTS + 1, 1, 0).validate().is_err());
        assert!(gen_sine_episode(&StreamSpec::new(Domain::SynthDensity, 1, 1, 0), id(0)).is_err());
    }

    #[test]
    fn text_format_round_trips() {
        for domain in [Domain::Sine, Domain::SynthClassify, Domain::SynthDensity] {
            let spec = StreamSpec::new(domain, 3, 2, 21);
            let mut ep = gen_episode(&spec, EpisodeId::new(Split::MetaTest, 4)).unwrap();
            let back = Episode::from_text(&ep.to_text()).unwrap();
            ep.task_params.clear();
            assert_eq!(back, ep);
        }
        assert!(Episode::from_text("nonsense").is_err());
    }
}
