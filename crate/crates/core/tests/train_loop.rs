mod common;

use proptest::prelude::*;
use rand::Rng;

use trafficgcn::config::{RunConfig, SeedStream};
use trafficgcn::data::{generate_synthetic, SynthOptions};
use trafficgcn::diffcore::Tensor;
use trafficgcn::eval::{evaluate, ModelForecaster};
use trafficgcn::graph::Topology;
use trafficgcn::model::{Model, TemporalCell};
use trafficgcn::pipeline::{self, Prepared};
use trafficgcn::train::{
    adam_step, batch_gradients, batch_loss, clip_global_norm, sgd_step, train, AdamState,
    TrainConfig, TrainHistory, TrainingSet,
};
use trafficgcn::Error;

use common::*;

fn small_run(steps: usize) -> (RunConfig, Prepared, Model) {
    let topo = Topology::ring(5).unwrap();
    let series = generate_synthetic(&topo, steps, 21, &SynthOptions::default()).unwrap();
    let mut config = RunConfig::default();
    config.data.window = 6;
    config.model.gcn_hidden = vec![8];
    config.model.hidden = 8;
    config.model.head_hidden = vec![8];
    config.train.batch_size = 16;
    let prepared = pipeline::prepare(&config, &series, &topo, None).unwrap();
    let model = Model::new(config.model_config(5), &mut config.rng(SeedStream::Init)).unwrap();
    (config, prepared, model)
}

fn run(
    config: &TrainConfig,
    prepared: &Prepared,
    model: &Model,
) -> trafficgcn::Result<(Model, TrainHistory)> {
    let set = TrainingSet {
        train: &prepared.train,
        val: &prepared.val,
        source: &prepared.source,
        normalizer: &prepared.normalizer,
    };
    train(model.clone(), &set, config, rng(99), |_| {})
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (config, prepared, model) = small_run(300);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 3,
        ..config.train
    };
    let (best, history) = run(&cfg, &prepared, &model).unwrap();
    assert_eq!(best, model);
    assert_eq!(history.epochs.len(), 3);
    let first = history.epochs[0].val.mae;
    assert!(history.epochs.iter().all(|e| e.val.mae == first));
    assert_eq!(history.best_epoch, 0);
}

#[test]
fn patience_one_stops_after_a_flat_epoch() {
    let (config, prepared, model) = small_run(300);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 50,
        patience: 1,
        ..config.train
    };
    let (_, history) = run(&cfg, &prepared, &model).unwrap();
    assert_eq!(history.epochs.len(), 2);
}

#[test]
fn training_is_deterministic_and_improves() {
    let (config, prepared, model) = small_run(600);
    let cfg = TrainConfig {
        epochs: 12,
        learning_rate: 5e-3,
        ..config.train
    };
    let (a, ha) = run(&cfg, &prepared, &model).unwrap();
    let (b, hb) = run(&cfg, &prepared, &model).unwrap();
    assert_eq!(a, b);
    let strip = |h: &TrainHistory| {
        h.epochs
            .iter()
            .map(|e| {
                (
                    e.train_loss.to_bits(),
                    e.val.mae.to_bits(),
                    e.val.rmse.to_bits(),
                )
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&ha), strip(&hb));
    assert!(ha.best().val.mae < ha.epochs[0].val.mae);
    assert!(ha.epochs.last().unwrap().train_loss < ha.epochs[0].train_loss);

    // the returned snapshot is the best epoch's model
    let f = ModelForecaster {
        model: &a,
        source: &prepared.source,
    };
    let again = evaluate(&f, &prepared.val, &prepared.normalizer).unwrap();
    assert!((again.mae - ha.best().val.mae).abs() < 1e-12);
    for (k, e) in ha.epochs.iter().enumerate() {
        assert_eq!(e.epoch, k + 1);
        if k != ha.best_epoch {
            assert!(e.val.mae >= ha.best().val.mae);
        }
    }
}

#[test]
fn non_finite_targets_abort_as_divergence() {
    let (config, mut prepared, model) = small_run(300);
    prepared.train.samples[0].target.set(0, 0, f64::NAN);
    let cfg = TrainConfig {
        epochs: 2,
        ..config.train
    };
    let err = run(&cfg, &prepared, &model).unwrap_err();
    assert!(err.is_numeric(), "{err}");
    assert!(matches!(err, Error::Diverged(_)));
}

#[test]
fn small_gradient_steps_decrease_the_loss() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let cell = if seed % 2 == 0 {
            TemporalCell::Gru
        } else {
            TemporalCell::Lstm
        };
        let mut model =
            Model::new(tiny_config(4, seed % 3 == 0, cell, seed % 4 == 1), &mut r).unwrap();
        let source = if seed % 4 == 1 {
            trafficgcn::model::AdjacencySource::Learnable
        } else {
            static_source(&mut r, 4)
        };
        let samples: Vec<_> = (0..8).map(|_| random_sample(&mut r, 5, 4, 1)).collect();
        let refs: Vec<_> = samples.iter().collect();
        let (before, grads) = batch_gradients(&model, &refs, &source).unwrap();
        let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
        sgd_step(
            &mut model.params.tensors_mut(),
            &grads,
            1e-3 / norm.max(1.0),
        );
        let after = batch_loss(&model, &refs, &source).unwrap();
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

/// Textbook Adam on flat slices.
fn reference_adam(p: &mut [f64], g_seq: &[Vec<f64>], cfg: &TrainConfig) {
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    for (t, g) in g_seq.iter().enumerate() {
        let t = (t + 1) as f64;
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - cfg.beta1.powf(t));
            let vh = v[i] / (1.0 - cfg.beta2.powf(t));
            p[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adam_matches_reference(seed in any::<u64>(), steps in 1usize..8, lr in 1e-4f64..1e-1) {
        let mut r = rng(seed);
        let cfg = TrainConfig { learning_rate: lr, ..TrainConfig::default() };
        let mut a = random_tensor(&mut r, 2, 3, 1.0);
        let mut b = random_tensor(&mut r, 1, 2, 1.0);
        let mut flat: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
        let seq: Vec<(Tensor, Tensor)> = (0..steps)
            .map(|_| (random_tensor(&mut r, 2, 3, 2.0), random_tensor(&mut r, 1, 2, 2.0)))
            .collect();
        let flat_seq: Vec<Vec<f64>> = seq.iter().map(|(x, y)| x.data().iter().chain(y.data()).copied().collect()).collect();
        let mut state = AdamState::new([&a, &b]);
        let names = vec!["a".to_string(), "b".to_string()];
        for (ga, gb) in &seq {
            adam_step(&mut [&mut a, &mut b], &[ga.clone(), gb.clone()], &names, &mut state, &cfg).unwrap();
        }
        reference_adam(&mut flat, &flat_seq, &cfg);
        let got: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
        for (x, y) in got.iter().zip(&flat) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert_eq!(state.step, steps as u64);
    }

    #[test]
    fn clipping_caps_norm_and_keeps_direction(seed in any::<u64>(), max in 0.01f64..10.0) {
        let mut r = rng(seed);
        let original: Vec<Tensor> = (0..3)
            .map(|_| {
                let rows = r.gen_range(1..4);
                random_tensor(&mut r, rows, 2, 3.0)
            })
            .collect();
        let mut grads = original.clone();
        let before = clip_global_norm(&mut grads, max);
        let direct = original.iter().map(|t| t.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        prop_assert!((before - direct).abs() <= 1e-12 * direct.max(1.0));
        let after = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
        prop_assert!(after <= max.min(direct) * (1.0 + 1e-12));
        let factor = if direct > max { max / direct } else { 1.0 };
        for (g, o) in grads.iter().zip(&original) {
            for (x, y) in g.data().iter().zip(o.data()) {
                prop_assert!((x - y * factor).abs() <= 1e-12);
            }
        }
    }
}
