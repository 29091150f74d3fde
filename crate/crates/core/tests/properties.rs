mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sbmcl_core::autodiff::{cholesky, cholesky_solve, Matrix, Tape};
use sbmcl_core::episode::{Domain, Examples, Targets};
use sbmcl_core::expfam::{ClasswiseGaussianBank, FactorizedGaussian, MatrixNormalState, NoisyObservation};
use sbmcl_core::models::{HeadKind, ModelConfig, PredictMode, SbmclModel, StreamPath};

fn matrix(rows: usize, cols: usize, bound: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-bound..bound, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d))
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn close(a: &Matrix, b: &DMatrix<f64>, tol: f64) -> bool {
    let scale = 1.0 + b.amax();
    (0..a.rows()).all(|r| (0..a.cols()).all(|c| (a.get(r, c) - b[(r, c)]).abs() <= tol * scale))
}

fn gaussian(d: usize) -> impl Strategy<Value = FactorizedGaussian> {
    (prop::collection::vec(-1e3..1e3, d), prop::collection::vec(1e-3..1e3, d))
        .prop_map(|(mu, lambda)| FactorizedGaussian::new(mu, lambda).unwrap())
}

fn observations(d: usize, max: usize) -> impl Strategy<Value = Vec<NoisyObservation>> {
    prop::collection::vec(
        (prop::collection::vec(-1e3..1e3, d), prop::collection::vec(0.0..1e3, d))
            .prop_map(|(z, p)| NoisyObservation::new(z, p).unwrap()),
        0..max,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_nalgebra((n, k, m) in (1usize..12, 1usize..12, 1usize..12), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = common::random_matrix(&mut rng, n, k, -10.0, 10.0);
        let b = common::random_matrix(&mut rng, k, m, -10.0, 10.0);
        prop_assert!(close(&a.matmul(&b), &(to_na(&a) * to_na(&b)), 1e-12));
        let bt = b.transpose();
        prop_assert!(close(&a.matmul_t(&bt, false, true), &(to_na(&a) * to_na(&b)), 1e-12));
    }

    #[test]
    fn cholesky_matches_nalgebra(a in matrix(6, 6, 3.0), rhs in matrix(6, 2, 3.0)) {
        let spd = a.matmul_t(&a, false, true);
        let mut spd = spd;
        for i in 0..6 {
            spd.set(i, i, spd.get(i, i) + 1.0);
        }
        let l = cholesky(&spd).unwrap();
        let na = to_na(&spd).cholesky().unwrap();
        prop_assert!(close(&l, &na.l(), 1e-10));
        prop_assert!(close(&cholesky_solve(&l, &rhs), &na.solve(&to_na(&rhs)), 1e-9));
    }

    #[test]
    fn posterior_updates_stay_finite_and_concentrate(prior in gaussian(5), stream in observations(5, 40)) {
        let mut g = prior.clone();
        for obs in &stream {
            let next = g.seq_update(obs).unwrap();
            prop_assert!(next.lambda().iter().zip(g.lambda()).all(|(a, b)| a >= b));
            prop_assert!(next.mu().iter().all(|m| m.is_finite() && m.abs() <= 1e3 + 1e-9));
            g = next;
        }
        let batch = prior.batch_update(&stream).unwrap();
        prop_assert!(g.mu().iter().zip(batch.mu()).all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + b.abs())));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(q in gaussian(4), p in gaussian(4)) {
        prop_assert!(q.kl_to(&p).unwrap() >= -1e-9);
        prop_assert!(q.kl_to(&q).unwrap().abs() < 1e-12);
    }

    #[test]
    fn matrix_normal_updates_stay_finite(rows in prop::collection::vec((prop::collection::vec(-1e3..1e3, 4), -1e3..1e3f64), 1..30)) {
        let mut s = MatrixNormalState::from_prior(&Matrix::zeros(4, 1), &[1.0; 4], 0.1).unwrap();
        for (phi, y) in &rows {
            s = s.update(phi, &[*y]).unwrap();
        }
        let (mean, var) = s.predict(&rows[0].0).unwrap();
        prop_assert!(mean.iter().all(|m| m.is_finite()));
        prop_assert!(var.is_finite() && var > 0.0);
    }

    #[test]
    fn bank_probabilities_are_a_distribution(emb in prop::collection::vec(-1e3..1e3, 3), obs in observations(3, 12)) {
        let bank = ClasswiseGaussianBank::new(FactorizedGaussian::unit(3), vec![0.5; 3]).unwrap();
        let bank = obs.iter().enumerate().fold(bank, |b, (i, o)| b.update(i % 4, o).unwrap());
        if bank.num_classes() > 0 {
            let scores = bank.classify(&emb, sbmcl_core::expfam::ClassifyMode::Predictive).unwrap();
            prop_assert!(scores.iter().all(|(_, s)| s.is_finite()));
        }
    }

    #[test]
    fn tape_ops_are_finite_on_large_inputs(a in matrix(3, 4, 1e3)) {
        let mut t = Tape::new();
        let v = t.leaf(a);
        let ls = t.log_softmax_rows(v);
        let sp = t.softplus(v);
        let th = t.tanh(v);
        let sum = t.add(ls, sp).unwrap();
        let sum = t.add(sum, th).unwrap();
        let loss = t.sum(sum);
        prop_assert!(t.value(loss).is_finite());
        let g = t.backward(loss).unwrap();
        prop_assert!(g.get(v).is_finite());
    }
}

fn head_models() -> Vec<SbmclModel> {
    let combos = [
        (HeadKind::Generic, Domain::Sine),
        (HeadKind::Generic, Domain::SynthClassify),
        (HeadKind::Generic, Domain::SynthDensity),
        (HeadKind::Gemcl, Domain::SynthClassify),
        (HeadKind::Pn, Domain::SynthClassify),
        (HeadKind::Alpaca, Domain::Sine),
    ];
    combos
        .iter()
        .map(|&(h, d)| {
            let mut cfg = ModelConfig::new(h, d);
            cfg.z_dim = 6;
            cfg.hidden = 16;
            cfg.layers = 2;
            SbmclModel::new(cfg, 2).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn model_predictions_are_finite_on_bounded_inputs(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for model in head_models() {
            let d = model.config().domain;
            let x = common::random_matrix(&mut rng, 12, d.x_dim(), -1e3, 1e3);
            let y = match d {
                Domain::Sine => Targets::Real(common::random_matrix(&mut rng, 12, 1, -1e3, 1e3)),
                Domain::SynthClassify => Targets::Labels((0..12).map(|i| i % 3).collect()),
                Domain::SynthDensity => Targets::None,
            };
            let train = Examples { x: x.clone(), y, tasks: vec![0; 12] };
            let post = model.learn_stream(&train, StreamPath::Batch).unwrap();
            for mode in [PredictMode::Map, PredictMode::DEFAULT_MC] {
                let pred = model.predict(&post, &x, mode, &mut rng).unwrap();
                let ll = pred.log_likelihood(&train);
                prop_assert!(ll.iter().all(|v| !v.is_nan()), "{:?}", model.config().head);
                if let Some(m) = pred.mean() {
                    prop_assert!(m.is_finite());
                }
            }
        }
    }
}
