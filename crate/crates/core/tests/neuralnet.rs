mod common;

use common::{alternating, rng, staged_dataset};
use hypnos_core::encoding::EncodingMode;
use hypnos_core::neuralnet::{
    accuracy, grad_check, load_ensemble, make_ensemble, sgd_momentum_step, train, Complexity, HeadMode, LossKind,
    Model, ModelParams, NetworkConfig, ParamLayout, Sequence, SgdMomentum, TensorSpec, TrainConfig, TrainState,
    Window, ENSEMBLE_SIZE, WEIGHT_DECAY,
};
use hypnos_core::Stage;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_window(model: &Model, r: &mut ChaCha8Rng) -> Window {
    Window {
        modalities: model.input_shapes().map(|s| (0..s.size()).map(|_| r.random_range(-1.0..1.0)).collect()),
    }
}

fn small(encoding: EncodingMode, mode: HeadMode, seed: u64) -> NetworkConfig {
    let mut c = NetworkConfig::new(encoding, mode, Complexity::Low, 5, seed);
    c.filters = [2, 3, 2];
    c.merge_units = 4;
    c
}

/// Parameters large enough that activations leave the linear regime.
fn scaled(mut model: Model, by: f64) -> Model {
    model.params.values.iter_mut().for_each(|v| *v *= by);
    model
}

#[test]
fn grad_check_ff() {
    for (encoding, kind) in [(EncodingMode::Cc, LossKind::OneVsRest), (EncodingMode::Octave, LossKind::Categorical)] {
        let model = scaled(Model::new(small(encoding, HeadMode::Ff, 3)).unwrap(), 3.0);
        assert!(model.params.len() <= 5000, "{} params", model.params.len());
        let mut r = rng(1);
        let w = [random_window(&model, &mut r)];
        let t = [Some(2)];
        let err = grad_check(&model, Sequence { windows: &w, targets: &t }, WEIGHT_DECAY, kind, 64, 9).unwrap();
        assert!(err < 1e-3, "{encoding:?}: {err}");
    }
}

#[test]
fn grad_check_lstm_three_steps() {
    let model = scaled(Model::new(small(EncodingMode::Cc, HeadMode::Lstm, 4)).unwrap(), 3.0);
    assert!(model.params.len() <= 5000, "{} params", model.params.len());
    let mut r = rng(2);
    let w: Vec<Window> = (0..3).map(|_| random_window(&model, &mut r)).collect();
    let t = [Some(0), None, Some(4)];
    let err = grad_check(&model, Sequence { windows: &w, targets: &t }, WEIGHT_DECAY, LossKind::OneVsRest, 64, 5)
        .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn zero_input_zero_bias_gives_no_first_layer_gradient() {
    let mut model = Model::new(small(EncodingMode::Cc, HeadMode::Ff, 8)).unwrap();
    let layout = model.params.layout.clone();
    for t in layout.tensors.iter().filter(|t| t.name.ends_with(".b")) {
        model.params.values[t.range()].fill(0.0);
    }
    let w = [Window { modalities: model.input_shapes().map(|s| vec![0.0; s.size()]) }];
    let (_, g) = model
        .loss_and_gradient(&[Sequence { windows: &w, targets: &[Some(1)] }], 0.0, LossKind::OneVsRest, None::<&mut ChaCha8Rng>)
        .unwrap();
    for name in ["eeg.conv0.w", "eog.conv0.w", "emg.conv0.w"] {
        let t = layout.get(name).unwrap();
        assert!(g[t.range()].iter().all(|&v| v == 0.0), "{name}");
    }
}

#[test]
fn ff_outputs_follow_window_order() {
    let model = Model::new(small(EncodingMode::Cc, HeadMode::Ff, 2)).unwrap();
    let mut r = rng(4);
    let w: Vec<Window> = (0..6).map(|_| random_window(&model, &mut r)).collect();
    let p = model.predict(&w).unwrap();
    let rev: Vec<Window> = w.iter().rev().cloned().collect();
    let q = model.predict(&rev).unwrap();
    for (a, b) in p.iter().zip(q.iter().rev()) {
        assert_eq!(a, b);
    }
    let single: Vec<_> = w.iter().map(|x| model.predict(std::slice::from_ref(x)).unwrap()[0]).collect();
    assert_eq!(single, p);
}

#[test]
fn lstm_carries_state() {
    let model = scaled(Model::new(small(EncodingMode::Cc, HeadMode::Lstm, 2)).unwrap(), 5.0);
    let mut r = rng(4);
    let w: Vec<Window> = (0..3).map(|_| random_window(&model, &mut r)).collect();
    let seq = model.predict(&w).unwrap();
    let alone = model.predict(&w[2..]).unwrap();
    assert_ne!(seq[2], alone[0]);
    assert_eq!(seq, model.predict(&w).unwrap());
}

#[test]
fn quadratic_bowl_shrinks() {
    // loss 0.5 ||w||^2 has gradient w
    let layout = ParamLayout {
        tensors: vec![TensorSpec { name: "w".into(), shape: vec![4], offset: 0 }],
    };
    let mut p = ModelParams { layout, values: vec![3.0, -2.0, 1.0, 5.0] };
    let mut st = TrainState::new(4);
    let opt = SgdMomentum { eta0: 0.05, ..SgdMomentum::default() };
    let norm = |p: &ModelParams| p.squared_norm().sqrt();
    let start = norm(&p);
    let mut norms = Vec::new();
    for _ in 0..200 {
        let g = p.values.clone();
        sgd_momentum_step(&mut p, &g, &mut st, &opt).unwrap();
        norms.push(norm(&p));
    }
    assert!(norms[199] < 1e-3 * start);
    // momentum oscillates early; the envelope decays after burn-in
    let envelope: Vec<f64> = norms.chunks(20).map(|c| c.iter().cloned().fold(0.0, f64::max)).collect();
    for pair in envelope[1..].windows(2) {
        assert!(pair[1] < pair[0], "{envelope:?}");
    }
}

#[test]
fn ensemble_sizes_stay_in_bounds() {
    let template = NetworkConfig::new(EncodingMode::Cc, HeadMode::Lstm, Complexity::High, 15, 0);
    let members = make_ensemble(&template, ENSEMBLE_SIZE, 42);
    assert_eq!(members.len(), 16);
    let within = |s: usize, t: usize| (t as f64 * 0.5).ceil() as usize <= s && s <= (t as f64 * 1.5).ceil() as usize;
    for m in &members {
        for (f, t) in m.filters.iter().zip(template.filters) {
            assert!(within(*f, t));
        }
        assert!(within(m.merge_units, template.merge_units));
    }
    assert_eq!(members, make_ensemble(&template, ENSEMBLE_SIZE, 42));
    assert_ne!(members, make_ensemble(&template, ENSEMBLE_SIZE, 43));
    let one = NetworkConfig { filters: [1, 1, 1], merge_units: 1, ..template };
    assert!(make_ensemble(&one, 50, 1).iter().all(|c| c.filters.iter().all(|&f| f >= 1) && c.merge_units >= 1));
}

fn toy_data(config: &NetworkConfig) -> Vec<hypnos_core::neuralnet::LabeledRecording> {
    let hyps: Vec<_> = (0..4).map(|_| alternating(Stage::W, Stage::N3, 20, 3)).collect();
    staged_dataset(config, &hyps, 100)
}

#[test]
fn toy_training_separates_two_stages() {
    let config = NetworkConfig::new(EncodingMode::Cc, HeadMode::Ff, Complexity::Low, 5, 11);
    let data = toy_data(&config);
    let cfg = TrainConfig { max_batches: 3000, ..TrainConfig::default() };
    let (model, report) = train(&data, &config, &cfg).unwrap();
    let acc = accuracy(&model, &data).unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
    assert!(report.early_stopped, "{report:?}");
    let best = report.validation.iter().map(|v| v.accuracy).fold(0.0, f64::max);
    assert_eq!(report.best_accuracy, best.max(report.best_accuracy));
    assert!(report.validation.iter().any(|v| v.batch == report.best_batch) || report.best_batch == 0);

    let (again, report2) = train(&data, &config, &cfg).unwrap();
    assert_eq!(again.params.values, model.params.values);
    assert_eq!(report2, report);

    let dir = tempfile::tempdir().unwrap();
    let path = hypnos_core::neuralnet::save_ensemble(dir.path(), std::slice::from_ref(&model)).unwrap();
    assert_eq!(load_ensemble(&path).unwrap(), vec![model]);
}

#[test]
fn lstm_training_runs_with_dropout() {
    let config = small(EncodingMode::Cc, HeadMode::Lstm, 5);
    let data = toy_data(&config);
    let cfg = TrainConfig { max_batches: 120, ..TrainConfig::default() };
    let (model, report) = train(&data, &config, &cfg).unwrap();
    assert!(report.batches_run > 0 && !report.validation.is_empty());
    assert!(model.params.values.iter().all(|v| v.is_finite()));
    let (again, _) = train(&data, &config, &cfg).unwrap();
    assert_eq!(again.params.values, model.params.values);
}

#[test]
fn one_recording_is_too_small() {
    let config = NetworkConfig::new(EncodingMode::Cc, HeadMode::Ff, Complexity::Low, 5, 1);
    let data = toy_data(&config);
    assert!(matches!(
        train(&data[..1], &config, &TrainConfig::default()),
        Err(hypnos_core::Error::DatasetTooSmall(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn softmax_outputs_are_distributions(seed in 0u64..1000, scale in 0.1f64..20.0) {
        let model = scaled(Model::new(small(EncodingMode::Cc, HeadMode::Lstm, seed)).unwrap(), scale);
        let mut r = rng(seed);
        let w: Vec<Window> = (0..3).map(|_| random_window(&model, &mut r)).collect();
        for p in model.predict(&w).unwrap() {
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn learning_rate_strictly_decreases(t in 0u64..1_000_000) {
        let opt = SgdMomentum::default();
        prop_assert!(opt.learning_rate(t + 1) < opt.learning_rate(t));
    }
}
