mod common;

use common::rng;
use hypnos_core::diagnosis::{
    apply_hla, ensemble_diagnose, evaluate, gp_fit, load_classifier, rfe, roc_to_csv, save_classifier,
    wilson_interval, GpModel, NarcolepsyClassifier, RfeConfig, HLA_THRESHOLD, NARCOLEPSY_THRESHOLD,
};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Two isotropic blobs at (+-2, +-2).
fn blobs(r: &mut ChaCha8Rng, n: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
    let y: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let x = y
        .iter()
        .map(|&pos| {
            let c = if pos { 2.0 } else { -2.0 };
            vec![c + 0.7 * normal(r), c + 0.7 * normal(r)]
        })
        .collect();
    (x, y)
}

#[test]
fn separable_blobs_are_learned() {
    let mut r = rng(1);
    let (x, y) = blobs(&mut r, 100);
    let gp = gp_fit(&x, &y).unwrap();
    let scores: Vec<f64> = x.iter().map(|p| gp.predict(p).unwrap().0).collect();
    let hits = scores.iter().zip(&y).filter(|(s, &t)| (**s >= 0.0) == t).count();
    assert!(hits as f64 / 100.0 >= 0.98, "{hits}");
    assert!(evaluate(&scores, &y, &[0.0]).unwrap().auc >= 0.98);
    assert!(gp.predict(&[2.0, 2.0]).unwrap().0 > 0.5);
    assert!(gp.predict(&[-2.0, -2.0]).unwrap().0 < -0.5);

    let (test_x, test_y) = blobs(&mut rng(2), 200);
    let test: Vec<f64> = test_x.iter().map(|p| gp.predict(p).unwrap().0).collect();
    assert!(evaluate(&test, &test_y, &[0.0]).unwrap().auc >= 0.98);
}

#[test]
fn flipping_labels_negates_scores() {
    let mut r = rng(3);
    let (x, y) = blobs(&mut r, 60);
    let flipped: Vec<bool> = y.iter().map(|v| !v).collect();
    let a = gp_fit(&x, &y).unwrap();
    let b = gp_fit(&x, &flipped).unwrap();
    for _ in 0..50 {
        let p = vec![3.0 * normal(&mut r), 3.0 * normal(&mut r)];
        let (sa, va) = a.predict(&p).unwrap();
        let (sb, vb) = b.predict(&p).unwrap();
        assert!((sa + sb).abs() < 1e-6, "{sa} {sb}");
        assert!((va - vb).abs() < 1e-6);
    }
}

#[test]
fn conflicting_duplicate_is_uncertain() {
    let mut r = rng(4);
    let (mut x, mut y) = blobs(&mut r, 40);
    let p = vec![5.0, -5.0];
    x.push(p.clone());
    y.push(true);
    x.push(p.clone());
    y.push(false);
    let gp = gp_fit(&x, &y).unwrap();
    assert!(gp.predict(&p).unwrap().0.abs() < 0.5);
}

#[test]
fn far_field_reverts_to_prior() {
    let mut r = rng(5);
    let (x, y) = blobs(&mut r, 30);
    let y: Vec<bool> = y.iter().enumerate().map(|(i, v)| if i < 6 { true } else { *v }).collect();
    let gp = gp_fit(&x, &y).unwrap();
    let h = gp.hyper;
    let (s, v) = gp.predict(&[1e4, -1e4]).unwrap();
    let prior = statrs::function::erf::erf(h.mean / (2.0 * (1.0 + h.signal_sd * h.signal_sd)).sqrt());
    assert!((s - prior).abs() < 1e-12, "{s} vs {prior}");
    assert!((v - h.signal_sd * h.signal_sd).abs() < 1e-12);
}

#[test]
fn symmetric_fixture_is_undecided_on_the_boundary() {
    let mut r = rng(6);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for _ in 0..20 {
        let a = 1.0 + r.random_range(0.0..2.0);
        let b = r.random_range(-2.0..2.0);
        x.push(vec![a, b]);
        y.push(true);
        x.push(vec![-a, b]);
        y.push(false);
    }
    let gp = gp_fit(&x, &y).unwrap();
    for b in [-1.5, 0.0, 1.0] {
        assert!(gp.predict(&[0.0, b]).unwrap().0.abs() < 0.05);
    }
}

#[test]
fn dimension_checked() {
    let (x, y) = blobs(&mut rng(7), 20);
    let gp = gp_fit(&x, &y).unwrap();
    assert!(matches!(gp.predict(&[1.0]), Err(hypnos_core::Error::DimensionMismatch { .. })));
    assert!(gp_fit(&x[..5], &y[..5]).is_err());
    let refit = GpModel::with_hyper(gp.x.clone(), gp.y.clone(), gp.hyper).unwrap();
    assert_eq!(refit.predict(&[0.3, 0.1]).unwrap(), gp.predict(&[0.3, 0.1]).unwrap());
}

/// Columns 0 and 1 carry the label, the rest are noise.
fn relevance_fixture(r: &mut ChaCha8Rng, n: usize, noise: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
    let y: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let x = y
        .iter()
        .map(|&pos| {
            let s = if pos { 1.0 } else { -1.0 };
            let mut row = vec![s * 1.5 + 0.5 * normal(r), -s * 1.0 + 0.5 * normal(r)];
            row.extend((0..noise).map(|_| normal(r)));
            row
        })
        .collect();
    (x, y)
}

#[test]
fn rfe_keeps_informative_features() {
    let mut r = rng(8);
    let (x, y) = relevance_fixture(&mut r, 120, 50);
    for n in [120, 30] {
        let cfg = RfeConfig { target: 5, ..RfeConfig::default() };
        let sel = rfe(&x[..n], &y[..n], &cfg).unwrap();
        assert_eq!(sel.frequency[0], 1.0, "n={n}");
        assert_eq!(sel.frequency[1], 1.0, "n={n}");
        let expected: Vec<usize> = (0..52).filter(|&j| sel.frequency[j] >= 0.40).collect();
        assert_eq!(sel.selected, expected);
        let total: f64 = sel.frequency.iter().sum();
        assert!((total - 5.0).abs() < 1e-12);
    }
    assert!(matches!(rfe(&x[..10], &y[..10], &RfeConfig::default()), Err(hypnos_core::Error::TooFewSamples { .. })));
    let same = vec![true; 30];
    assert!(matches!(rfe(&x[..30], &same, &RfeConfig::default()), Err(hypnos_core::Error::SingleClass)));
}

#[test]
fn rfe_keeps_one_of_each_duplicate() {
    let mut r = rng(9);
    let (mut x, y) = relevance_fixture(&mut r, 80, 20);
    for row in &mut x {
        row.push(row[0]);
        row.push(row[1]);
    }
    let sel = rfe(&x, &y, &RfeConfig { target: 4, ..RfeConfig::default() }).unwrap();
    assert!(sel.frequency[0].max(sel.frequency[22]) > 0.0);
    assert!(sel.frequency[1].max(sel.frequency[23]) > 0.0);
}

#[test]
fn standardization_absorbs_affine_rescaling() {
    let mut r = rng(10);
    let (x, y) = relevance_fixture(&mut r, 40, 4);
    let cfg = RfeConfig { target: 3, folds: 5, ..RfeConfig::default() };
    let affine = |row: &Vec<f64>| -> Vec<f64> {
        row.iter().enumerate().map(|(j, v)| v * (j as f64 + 0.5) * 3.0 - 7.0 * j as f64).collect()
    };
    let scaled: Vec<Vec<f64>> = x.iter().map(affine).collect();
    let a = NarcolepsyClassifier::fit(&x, &y, &cfg).unwrap();
    let b = NarcolepsyClassifier::fit(&scaled, &y, &cfg).unwrap();
    assert_eq!(a.selection.selected, b.selection.selected);
    for _ in 0..20 {
        let p: Vec<f64> = (0..6).map(|_| 2.0 * normal(&mut r)).collect();
        let (sa, _) = a.predict(&p).unwrap();
        let (sb, _) = b.predict(&affine(&p)).unwrap();
        assert!((sa - sb).abs() < 1e-6, "{sa} {sb}");
    }
}

#[test]
fn classifier_archive_round_trips() {
    let mut r = rng(11);
    let (x, y) = relevance_fixture(&mut r, 40, 10);
    let clf = NarcolepsyClassifier::fit(&x, &y, &RfeConfig { target: 4, ..RfeConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = save_classifier(dir.path(), "gp00", &clf).unwrap();
    let back = load_classifier(&path).unwrap();
    assert_eq!(back.selection, clf.selection);
    for row in x.iter().take(10) {
        assert_eq!(back.predict(row).unwrap(), clf.predict(row).unwrap());
    }
}

#[test]
fn roc_fixtures() {
    let truth = [true, true, true, false, false, false, false];
    let perfect = evaluate(&[0.9, 0.8, 0.7, 0.1, 0.0, -0.5, -0.9], &truth, &[]).unwrap();
    assert_eq!(perfect.auc, 1.0);
    let flat = evaluate(&[0.3; 7], &truth, &[]).unwrap();
    assert_eq!(flat.auc, 0.5);

    // at threshold 0: tp 2, fn 1, tn 3, fp 1
    let e = evaluate(&[0.5, 0.1, -0.2, 0.4, -0.1, -0.3, -0.6], &truth, &[0.0]).unwrap();
    let op = &e.operating[0];
    assert_eq!((op.true_positive, op.false_negative, op.true_negative, op.false_positive), (2, 1, 3, 1));
    assert_eq!(op.sensitivity, 2.0 / 3.0);
    assert_eq!(op.specificity, 0.75);
    assert_eq!(op.sensitivity_ci, wilson_interval(2, 3));
    assert!(roc_to_csv(&e).starts_with("threshold,sensitivity,specificity\ninf,0,1\n"));
    assert!(evaluate(&[0.1, 0.2], &[true, true], &[]).is_err());
}

#[test]
fn published_thresholds() {
    assert_eq!(NARCOLEPSY_THRESHOLD, -0.03);
    assert_eq!(HLA_THRESHOLD, -0.53);
    assert!(ensemble_diagnose(&[-0.02]).unwrap().label);
    assert!(!ensemble_diagnose(&[-0.04]).unwrap().label);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hla_gate_is_absorbing(scores in proptest::collection::vec(-1.0f64..=1.0, 1..16)) {
        let r = apply_hla(ensemble_diagnose(&scores).unwrap(), false);
        prop_assert!(!r.label && r.hla_used);
    }

    #[test]
    fn roc_is_monotone(seed in 0u64..10_000, n in 4usize..60) {
        let mut r = rng(seed);
        let truth: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(-1.0f64..1.0) * 10.0).round() / 10.0).collect();
        let e = evaluate(&scores, &truth, &[]).unwrap();
        for w in e.roc.windows(2) {
            prop_assert!(w[1].sensitivity >= w[0].sensitivity);
            prop_assert!(w[1].specificity <= w[0].specificity);
        }
        prop_assert!((0.0..=1.0).contains(&e.auc));
    }

    #[test]
    fn scores_bounded(seed in 0u64..200) {
        let mut r = rng(seed);
        let (x, y) = blobs(&mut r, 12);
        let gp = gp_fit(&x, &y).unwrap();
        for _ in 0..10 {
            let p = vec![5.0 * normal(&mut r), 5.0 * normal(&mut r)];
            let (s, v) = gp.predict(&p).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s) && v >= 0.0);
        }
    }
}
