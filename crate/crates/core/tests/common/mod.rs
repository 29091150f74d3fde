#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbmcl_core::autodiff::{Matrix, Tape, Var};
use sbmcl_core::episode::{Domain, Episode};
use sbmcl_core::harness::MetaConfig;
use sbmcl_core::models::{HeadKind, SbmclModel};

/// Sine regression with the alpaca head, sized for a single CPU core.
pub fn sine_config() -> MetaConfig {
    let mut c = MetaConfig::new(HeadKind::Alpaca, Domain::Sine);
    c.model.z_dim = 256;
    c.model.hidden = 128;
    c.model.layers = 2;
    c.model.noise_var = 0.01;
    c.lr = 2e-3;
    c.steps = 4000;
    c
}

pub fn classify_config(head: HeadKind) -> MetaConfig {
    let mut c = MetaConfig::new(head, Domain::SynthClassify);
    c.model.z_dim = 32;
    c.model.hidden = 64;
    c.model.layers = 2;
    c.steps = 600;
    c
}

pub fn density_config() -> MetaConfig {
    let mut c = MetaConfig::new(HeadKind::Generic, Domain::SynthDensity);
    c.model.z_dim = 16;
    c.model.hidden = 64;
    c.model.layers = 2;
    c.steps = 600;
    c
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// Relative error with a floor on the denominator.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between the analytic gradient of `sum(w * f(inputs))`
/// and central differences with step `h`, over every input entry.
pub fn op_grad_error(inputs: &[Matrix], h: f64, f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let shape = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone())).collect();
        let out = f(&mut t, &vars);
        t.shape(out)
    };
    let w = random_matrix(&mut rng, shape.0, shape.1, -1.0, 1.0);
    let build = |ins: &[Matrix]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|m| t.leaf(m.clone())).collect();
        let out = f(&mut t, &vars);
        let wv = t.constant(w.clone());
        let prod = t.mul(out, wv).unwrap();
        let loss = t.sum(prod);
        (t, vars, loss)
    };
    let value = |ins: &[Matrix]| {
        let (t, _, loss) = build(ins);
        t.value(loss).item()
    };
    let (tape, vars, loss) = build(inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            let fd = (value(&plus) - value(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[j], fd, 1.0));
        }
    }
    worst
}

/// Every tape primitive on random inputs; returns `(op, max relative error)`.
pub fn all_op_grad_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_matrix(&mut rng, 3, 4, -2.0, 2.0);
    let b = random_matrix(&mut rng, 3, 4, -2.0, 2.0);
    let p = random_matrix(&mut rng, 3, 4, 0.5, 2.5);
    let m = random_matrix(&mut rng, 4, 2, -2.0, 2.0);
    let row = random_matrix(&mut rng, 1, 4, -2.0, 2.0);
    let sq = random_matrix(&mut rng, 3, 3, -1.0, 1.0);
    let rhs = random_matrix(&mut rng, 3, 2, -1.0, 1.0);
    type Op = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
    let cases: Vec<(&'static str, Vec<Matrix>, Op)> = vec![
        ("matmul", vec![a.clone(), m.clone()], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("transpose", vec![a.clone()], Box::new(|t, v| t.transpose(v[0]))),
        ("add", vec![a.clone(), b.clone()], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("add (row broadcast)", vec![a.clone(), row.clone()], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("div", vec![a.clone(), p.clone()], Box::new(|t, v| t.div(v[0], v[1]).unwrap())),
        ("neg", vec![a.clone()], Box::new(|t, v| t.neg(v[0]))),
        ("scale", vec![a.clone()], Box::new(|t, v| t.scale(v[0], 2.5))),
        ("add_scalar", vec![a.clone()], Box::new(|t, v| t.add_scalar(v[0], -0.7))),
        ("exp", vec![a.clone()], Box::new(|t, v| t.exp(v[0]))),
        ("log", vec![p.clone()], Box::new(|t, v| t.log(v[0]))),
        ("tanh", vec![a.clone()], Box::new(|t, v| t.tanh(v[0]))),
        ("relu", vec![a.clone()], Box::new(|t, v| t.relu(v[0]))),
        ("softplus", vec![a.clone()], Box::new(|t, v| t.softplus(v[0]))),
        ("positive", vec![a.clone()], Box::new(|t, v| t.positive(v[0]))),
        ("square", vec![a.clone()], Box::new(|t, v| t.square(v[0]))),
        ("sqrt", vec![p.clone()], Box::new(|t, v| t.sqrt(v[0]))),
        ("reciprocal", vec![p.clone()], Box::new(|t, v| t.reciprocal(v[0]))),
        ("sum", vec![a.clone()], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![a.clone()], Box::new(|t, v| t.mean(v[0]))),
        ("sum_rows", vec![a.clone()], Box::new(|t, v| t.sum_rows(v[0]))),
        ("sum_cols", vec![a.clone()], Box::new(|t, v| t.sum_cols(v[0]))),
        ("broadcast_rows", vec![row.clone()], Box::new(|t, v| t.broadcast_rows(v[0], 5).unwrap())),
        ("concat_cols", vec![a.clone(), p.clone()], Box::new(|t, v| t.concat_cols(&[v[0], v[1]]).unwrap())),
        ("concat_rows", vec![a.clone(), row.clone()], Box::new(|t, v| t.concat_rows(&[v[0], v[1]]).unwrap())),
        ("slice_cols", vec![a.clone()], Box::new(|t, v| t.slice_cols(v[0], 1..3).unwrap())),
        ("slice_rows", vec![a.clone()], Box::new(|t, v| t.slice_rows(v[0], 1..3).unwrap())),
        ("log_softmax_rows", vec![a.clone()], Box::new(|t, v| t.log_softmax_rows(v[0]))),
        (
            "solve_spd",
            vec![sq.clone(), rhs.clone()],
            Box::new(|t, v| {
                let st = t.transpose(v[0]);
                let g = t.matmul(v[0], st).unwrap();
                let eye = t.constant(Matrix::identity(3));
                let spd = t.add(g, eye).unwrap();
                t.solve_spd(spd, v[1]).unwrap()
            }),
        ),
    ];
    // relu has a kink at 0; the random inputs stay clear of it by more than the step.
    cases.into_iter().map(|(name, ins, f)| (name, op_grad_error(&ins, 1e-5, &*f))).collect()
}

/// Gradient of the episode loss with fixed latent noise versus central
/// differences for `count` distinct randomly chosen parameter entries.
/// Returns the relative errors.
pub fn model_grad_errors(model: &SbmclModel, episode: &Episode, eps: &Matrix, count: usize, seed: u64) -> Vec<f64> {
    let (_, grads) = model.loss_and_grads(episode, eps).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = model.params().values().iter().map(Matrix::len).collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-5;
    let picks = rand::seq::index::sample(&mut rng, total, count.min(total));
    let mut out = Vec::with_capacity(count);
    for mut flat in picks.into_iter() {
        let mut k = 0;
        while flat >= sizes[k] {
            flat -= sizes[k];
            k += 1;
        }
        let loss_at = |delta: f64| {
            let mut m = model.clone();
            m.params_mut().values_mut()[k].data_mut()[flat] += delta;
            m.elbo_with_eps(episode, eps).unwrap().loss()
        };
        let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        out.push(rel_err(grads[k].data()[flat], fd, 1e-6));
    }
    out
}

pub fn gaussian_log_density(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m) * (x - m) / v))
        .sum()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}
