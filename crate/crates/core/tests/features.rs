mod common;

use common::feature_oracle::{oracle_combos, oracle_vector, random_hd, STAGE_NAMES};
use common::rng;
use hypnos_core::features::{
    assemble, combo_descriptors, feature_names, fragmentation_features, mixed_stage_onset, parse_csv, proto_series,
    sorem_analysis, to_csv, transition_features, transition_values_from_peaks, FeatureVector, PeakType, StageCombo,
    N_FEATURES, TRANSITIONS,
};
use hypnos_core::hypnodensity::{to_hypnogram, Hypnodensity};
use hypnos_core::{HypnogramLabels, Stage};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_independent_recomputation() {
    let mut r = rng(10);
    for i in 0..10 {
        let res = [5, 15, 30][i % 3];
        let n = (8 * 3600 / res) as usize - r.random_range(0..40);
        let hd = random_hd(&mut r, res, n - n % (30 / res as usize));
        let hyp = to_hypnogram(&hd, 30).unwrap();
        let fv = assemble(&hd, &hyp, None).unwrap();
        let oracle = oracle_vector(&hd, &hyp);
        assert_eq!(fv.values.len(), N_FEATURES);
        assert_eq!(oracle.len(), N_FEATURES);
        let names = feature_names();
        for (k, (a, b)) in fv.values.iter().zip(&oracle).enumerate() {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "recording {i} {}: {a} vs {b}", names[k]);
        }
        assert!(fv.values[N_FEATURES - 9..].iter().any(|&v| v > 0.0), "no transitions in recording {i}");
    }
}

#[test]
fn combo_names_follow_stage_order() {
    let names: Vec<String> = StageCombo::all().iter().map(|c| c.name()).collect();
    let expected: Vec<String> = oracle_combos()
        .iter()
        .map(|c| c.iter().map(|&k| STAGE_NAMES[k]).collect::<Vec<_>>().join("*"))
        .collect();
    assert_eq!(names, expected);
    assert_eq!(feature_names()[0], "W.mean");
    assert_eq!(feature_names()[465], "rem_latency_min");
    assert_eq!(feature_names()[480], "trans.REM>N2");
}

#[test]
fn uniform_hypnodensity_closed_forms() {
    let n = 960;
    let hd = Hypnodensity::new("u", 30, vec![[0.2; 5]; n]).unwrap();
    let minutes = n as f64 * 0.5;
    for combo in StageCombo::all() {
        let phi = (0..combo.len()).fold(1.0, |a, _| a * 0.2);
        let d = combo_descriptors(&proto_series(&hd, combo), 30).unwrap();
        let total = phi * n as f64;
        assert!((d[0] - phi).abs() < 1e-12 * phi);
        assert_eq!(d[1], phi);
        assert!(d[2] < 1e-12 * phi && d[3] == 0.0 && d[4] == 0.0);
        assert!((d[5] - (n as f64).ln()).abs() < 1e-9);
        for (k, p) in [5.0, 10.0, 30.0, 50.0, 70.0, 90.0].iter().enumerate() {
            assert!((d[6 + k] - p / 100.0 * minutes * total).abs() < 1e-9 * total * minutes, "{}", combo.name());
        }
        assert!((d[12] - total).abs() < 1e-12 * total);
        assert_eq!(d[13], 1.0);
        assert_eq!(d[14], 0.0);
    }
}

#[test]
fn mixed_stage_onset_constant_and_front_loaded() {
    let n = 200;
    let row = [0.4, 0.0, 0.3, 0.0, 0.3];
    let hd = Hypnodensity::new("c", 30, vec![row; n]).unwrap();
    let pi = 0.4 * 0.3 + 0.4 * 0.3 + 0.3 * 0.3;
    let total = pi * n as f64;
    assert!((mixed_stage_onset(&hd) - 0.05 * 100.0 * total).abs() < 1e-9);

    let mut rows = vec![[1.0, 0.0, 0.0, 0.0, 0.0]; n];
    rows[0] = row;
    let front = Hypnodensity::new("f", 30, rows).unwrap();
    assert!((mixed_stage_onset(&front) - 0.5 * pi).abs() < 1e-12);
}

fn labels(runs: &[(Stage, usize)], epoch_s: u32) -> HypnogramLabels {
    HypnogramLabels::new(runs.iter().flat_map(|&(s, k)| std::iter::repeat_n(s, k)).collect(), epoch_s).unwrap()
}

#[test]
fn sequencing_fixtures() {
    use Stage::*;
    let trace = sorem_analysis(&labels(&[(W, 10), (N1, 5), (Rem, 10)], 30));
    assert_eq!((trace.count, trace.total_duration_min, trace.sleep_latency_min), (1, 5.0, 5.0));

    let classic = sorem_analysis(&labels(&[(W, 10), (N1, 10), (N2, 80), (N3, 80), (Rem, 20)], 30));
    assert_eq!(classic.count, 0);
    assert_eq!(classic.rem_latency_min, 85.0);

    let awake = sorem_analysis(&labels(&[(W, 60)], 30));
    assert_eq!((awake.count, awake.sleep_latency_min, awake.rem_latency_min), (0, 30.0, 30.0));

    let mut blocks = Vec::new();
    for _ in 0..9 {
        blocks.extend([(N2, 4), (W, 2)]);
    }
    assert_eq!(fragmentation_features(&labels(&blocks, 30)).unwrap().nrem_fragmentations, 9);

    let early = fragmentation_features(&labels(&[(W, 6), (N2, 20), (Rem, 10), (N2, 200)], 30)).unwrap();
    assert_eq!(early.night_soremp, 1.0);
    let late = fragmentation_features(&labels(&[(W, 6), (N2, 31), (Rem, 10)], 30)).unwrap();
    assert_eq!(late.night_soremp, 0.0);

    let bouts = fragmentation_features(&labels(&[(W, 4), (N2, 40), (W, 6), (N2, 40), (N1, 2), (N2, 10), (W, 40)], 30))
        .unwrap();
    assert_eq!(bouts.long_wake_bouts, 2);
    assert_eq!(bouts.short_wake_min, 4.0);
    assert!(fragmentation_features(&labels(&[(N2, 3)], 30)).is_ok());
}

#[test]
fn single_dominant_stage_has_no_transitions() {
    let hd = Hypnodensity::new("n", 30, vec![[0.05, 0.05, 0.8, 0.05, 0.05]; 900]).unwrap();
    assert_eq!(transition_features(&hd), [0.0; 9]);
}

#[test]
fn vector_serialization_round_trips() {
    let mut r = rng(11);
    let rows: Vec<FeatureVector> = [Some(true), Some(false), None]
        .into_iter()
        .enumerate()
        .map(|(i, hla)| {
            let mut hd = random_hd(&mut r, 15, 1200);
            hd.recording_id = format!("r{i}");
            let hyp = to_hypnogram(&hd, 30).unwrap();
            assemble(&hd, &hyp, hla).unwrap()
        })
        .collect();
    assert_eq!(parse_csv(&to_csv(&rows)).unwrap(), rows);
    let json = serde_json::to_string(&rows).unwrap();
    assert_eq!(serde_json::from_str::<Vec<FeatureVector>>(&json).unwrap(), rows);
    assert!(parse_csv("recording_id,x\n").is_err());
}

fn refine(h: &HypnogramLabels, factor: usize) -> HypnogramLabels {
    let stages = h.stages.iter().flat_map(|&s| std::iter::repeat_n(s, factor)).collect();
    HypnogramLabels::new(stages, h.epoch_s / factor as u32).unwrap()
}

fn random_labels(r: &mut ChaCha8Rng, n: usize) -> HypnogramLabels {
    let mut s = Stage::W;
    let stages = (0..n)
        .map(|_| {
            if r.random_bool(0.2) {
                s = if r.random_bool(0.05) { Stage::Unscored } else { Stage::from_index(r.random_range(0..5)) };
            }
            s
        })
        .collect();
    HypnogramLabels::new(stages, 30).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sequencing_invariant_under_refinement(seed in 0u64..10_000, n in 1usize..300) {
        let mut r = rng(seed);
        let h = random_labels(&mut r, n);
        for factor in [2, 3, 6] {
            let fine = refine(&h, factor);
            prop_assert_eq!(sorem_analysis(&fine), sorem_analysis(&h));
            prop_assert_eq!(fragmentation_features(&fine).unwrap(), fragmentation_features(&h).unwrap());
        }
    }

    #[test]
    fn transitions_are_homogeneous(seed in 0u64..10_000, s in 1.0f64..20.0) {
        let mut r = rng(seed);
        let peaks: Vec<(PeakType, f64)> =
            (0..12).map(|_| (PeakType::ALL[r.random_range(0..4)], r.random_range(10.0..200.0))).collect();
        let base = transition_values_from_peaks(&peaks);
        let scaled: Vec<_> = peaks.iter().map(|&(t, m)| (t, m * s)).collect();
        for (a, b) in base.iter().zip(transition_values_from_peaks(&scaled)) {
            prop_assert!((b - s * a).abs() <= 1e-9 * b.abs().max(1.0));
        }
        prop_assert_eq!(TRANSITIONS.len(), 9);
    }

    #[test]
    fn proto_series_shrinks_with_membership(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let hd = random_hd(&mut r, 30, 50);
        for combo in StageCombo::all() {
            let members = combo.members();
            let series = proto_series(&hd, combo);
            let mut rev = members.clone();
            rev.reverse();
            prop_assert_eq!(&proto_series(&hd, StageCombo::new(&rev).unwrap()), &series);
            for extra in Stage::SCORED {
                let mut bigger = members.clone();
                bigger.push(extra);
                let grown = proto_series(&hd, StageCombo::new(&bigger).unwrap());
                prop_assert!(grown.iter().zip(&series).all(|(g, s)| g <= s));
            }
        }
    }

    #[test]
    fn onset_time_within_recording(seed in 0u64..10_000, n in 1usize..500) {
        let mut r = rng(seed);
        let hd = random_hd(&mut r, 30, n);
        let pi: f64 = hd.probs.iter().map(|p| p[0] * p[2] + p[0] * p[4] + p[2] * p[4]).sum();
        let minutes = mixed_stage_onset(&hd) / pi;
        prop_assert!(minutes >= 0.0 && minutes <= n as f64 * 0.5 + 1e-9);
    }
}
