mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sbmcl_core::episode::{gen_episode, Domain, EpisodeId, Split, StreamSpec};
use sbmcl_core::harness::{
    baseline_episode, eval_scores, meta_eval, meta_train, sweep_generalization, BaselineConfig, Checkpoint, EvalOptions,
    MetaConfig,
};
use sbmcl_core::models::{HeadKind, ModelConfig, PredictMode, SbmclModel, StreamPath};

fn small(head: HeadKind, domain: Domain) -> MetaConfig {
    let mut c = MetaConfig::new(head, domain);
    c.model.z_dim = 8;
    c.model.hidden = 16;
    c.model.layers = 2;
    c.steps = 0;
    c.eval_episodes = 16;
    c
}

fn variance(values: &[f64]) -> f64 {
    let m = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64
}

#[test]
fn more_latent_samples_reduce_elbo_variance() {
    let mut cfg = ModelConfig::new(HeadKind::Generic, Domain::Sine);
    cfg.z_dim = 4;
    cfg.hidden = 16;
    cfg.layers = 1;
    let model = SbmclModel::new(cfg, 0).unwrap();
    let ep = gen_episode(&StreamSpec::new(Domain::Sine, 3, 3, 0), EpisodeId::new(Split::MetaTrain, 0)).unwrap();
    let estimates = |n_z: usize| -> Vec<f64> {
        (0..100)
            .map(|s| model.elbo_supervised(&ep, n_z, &mut ChaCha8Rng::seed_from_u64(s)).unwrap().elbo)
            .collect()
    };
    let (one, sixteen) = (variance(&estimates(1)), variance(&estimates(16)));
    assert!(sixteen < one, "n_z=16 variance {sixteen} vs n_z=1 variance {one}");
}

#[test]
fn untrained_generic_classifier_is_at_chance() {
    let mut cfg = small(HeadKind::Generic, Domain::SynthClassify);
    cfg.eval_episodes = 200;
    let ckpt = Checkpoint::init(cfg).unwrap();
    let row = meta_eval(&ckpt, 10, 10, 200, EvalOptions::default()).unwrap();
    assert!((row.mean - 0.9).abs() <= 0.05, "error rate {}", row.mean);
}

#[test]
fn evaluation_is_deterministic_and_path_independent() {
    for (head, domain) in [
        (HeadKind::Alpaca, Domain::Sine),
        (HeadKind::Generic, Domain::Sine),
        (HeadKind::Generic, Domain::SynthDensity),
        (HeadKind::Gemcl, Domain::SynthClassify),
        (HeadKind::Pn, Domain::SynthClassify),
    ] {
        let ckpt = Checkpoint::init(small(head, domain)).unwrap();
        let before = ckpt.clone();
        let model = ckpt.model().unwrap();
        let source = ckpt.config.test_source(10, 10, 16);
        for mode in [PredictMode::DEFAULT_MC, PredictMode::Map] {
            let seq = EvalOptions { mode, path: StreamPath::Sequential };
            let batch = EvalOptions { mode, path: StreamPath::Batch };
            let a = eval_scores(&model, &source, seq, 0).unwrap();
            let b = eval_scores(&model, &source, seq, 0).unwrap();
            assert_eq!(a, b);
            let c = eval_scores(&model, &source, batch, 0).unwrap();
            for (x, y) in a.iter().zip(&c) {
                assert!((x.metric - y.metric).abs() < 1e-8, "{head:?}: {} vs {}", x.metric, y.metric);
                assert!((x.nll - y.nll).abs() < 1e-8 * (1.0 + x.nll.abs()), "{head:?}: {} vs {}", x.nll, y.nll);
            }
        }
        meta_eval(&ckpt, 10, 10, 4, EvalOptions::default()).unwrap();
        assert_eq!(ckpt, before);
    }
}

#[test]
fn single_point_sweep_equals_meta_eval() {
    let ckpt = Checkpoint::init(small(HeadKind::Alpaca, Domain::Sine)).unwrap();
    let rows = sweep_generalization(&ckpt, &[10], &[10], 16, EvalOptions::default()).unwrap();
    assert_eq!(rows, vec![meta_eval(&ckpt, 10, 10, 16, EvalOptions::default()).unwrap()]);
}

#[test]
fn a_few_hundred_steps_reduce_the_loss() {
    let mut drops = Vec::new();
    for seed in 0..5 {
        let mut cfg = small(HeadKind::Alpaca, Domain::Sine);
        cfg.seed = seed;
        cfg.steps = 200;
        cfg.meta_batch = 4;
        let trained = meta_train(&cfg).unwrap().checkpoint.model().unwrap();
        let init = Checkpoint::init(cfg).unwrap().model().unwrap();
        let source = cfg.test_source(10, 10, 16);
        let loss = |m: &SbmclModel| -> f64 {
            (0..source.len())
                .map(|i| {
                    let ep = source.episode(i).unwrap();
                    let eps = m.draw_eps(cfg.n_z, &mut ChaCha8Rng::seed_from_u64(i));
                    m.elbo_with_eps(&ep, &eps).unwrap().loss()
                })
                .sum()
        };
        drops.push(loss(&trained) - loss(&init));
    }
    assert!(common::median(&mut drops) < 0.0, "loss changes {drops:?}");
}

#[test]
fn offline_baseline_beats_online_on_sine() {
    let spec = StreamSpec::new(Domain::Sine, 10, 10, 0);
    let (mut online, mut offline) = (Vec::new(), Vec::new());
    for i in 0..8 {
        let ep = gen_episode(&spec, EpisodeId::new(Split::MetaTest, i)).unwrap();
        online.push(baseline_episode(&ep, &BaselineConfig::online(), 0).unwrap());
        offline.push(baseline_episode(&ep, &BaselineConfig::offline(), 0).unwrap());
    }
    let (on, off) = (common::median(&mut online), common::median(&mut offline));
    assert!(off <= on, "offline {off} vs online {on}");
}

#[test]
fn map_and_monte_carlo_agree_on_sine() {
    let mut cfg = small(HeadKind::Generic, Domain::Sine);
    cfg.steps = 300;
    cfg.lr = 3e-3;
    let ckpt = meta_train(&cfg).unwrap().checkpoint;
    let mc = meta_eval(&ckpt, 10, 10, 64, EvalOptions::default()).unwrap().mean;
    let map = meta_eval(&ckpt, 10, 10, 64, EvalOptions { mode: PredictMode::Map, path: StreamPath::Sequential }).unwrap().mean;
    assert!((map - mc).abs() <= 0.1 * mc, "map {map} vs mc {mc}");

    let alpaca = Checkpoint::init(small(HeadKind::Alpaca, Domain::Sine)).unwrap();
    let a = meta_eval(&alpaca, 10, 10, 8, EvalOptions::default()).unwrap();
    let b = meta_eval(&alpaca, 10, 10, 8, EvalOptions { mode: PredictMode::Map, path: StreamPath::Sequential }).unwrap();
    assert_eq!(a.mean, b.mean);
}
