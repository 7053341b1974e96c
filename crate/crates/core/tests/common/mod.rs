#![allow(dead_code)]

pub mod feature_oracle;

use std::f64::consts::PI;

use hypnos_core::signal_io::{ChannelRole, ChannelSynth, SynthSpec, Tone};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn sine(f: f64, amplitude: f64, fs: f64, secs: f64) -> Vec<f64> {
    let n = (fs * secs).round() as usize;
    (0..n)
        .map(|i| amplitude * (2.0 * PI * f * i as f64 / fs).sin())
        .collect()
}

/// Least-squares amplitude of a tone of known frequency.
pub fn tone_amplitude(y: &[f64], f: f64, fs: f64) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let w = 2.0 * PI * f * i as f64 / fs;
        s += v * w.sin();
        c += v * w.cos();
    }
    let n = y.len() as f64;
    2.0 * ((s / n).powi(2) + (c / n).powi(2)).sqrt()
}

/// Random EEG-like channel: delta, theta and alpha tones plus broadband noise.
pub fn eeg_like(rng: &mut ChaCha8Rng, role: ChannelRole, fs: f64) -> ChannelSynth {
    ChannelSynth {
        role,
        fs,
        tones: vec![
            Tone { freq_hz: rng.random_range(1.0..3.0), amplitude: rng.random_range(25.0..35.0) },
            Tone { freq_hz: rng.random_range(5.0..7.0), amplitude: rng.random_range(10.0..14.0) },
            Tone { freq_hz: rng.random_range(9.0..11.0), amplitude: rng.random_range(8.0..12.0) },
        ],
        noise_sigma: rng.random_range(4.0..6.0),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Full five-channel montage with EEG-like central/occipital, slow EOG, and
/// noisy EMG.
pub fn montage_spec(id: &str, seed: u64, fs: f64) -> SynthSpec {
    let mut r = rng(seed);
    let eeg = eeg_like(&mut r, ChannelRole::EegCLeft, fs);
    let occ = eeg_like(&mut r, ChannelRole::EegOLeft, fs);
    SynthSpec {
        recording_id: id.to_string(),
        channels: vec![
            eeg,
            occ,
            ChannelSynth {
                role: ChannelRole::EogL,
                fs,
                tones: vec![Tone { freq_hz: 0.5, amplitude: 40.0 }],
                noise_sigma: 5.0,
            },
            ChannelSynth {
                role: ChannelRole::EogR,
                fs,
                tones: vec![Tone { freq_hz: 0.5, amplitude: 35.0 }],
                noise_sigma: 5.0,
            },
            ChannelSynth {
                role: ChannelRole::EmgChin,
                fs,
                tones: vec![],
                noise_sigma: 8.0,
            },
        ],
    }
}

/// Hypnogram alternating between two stages every `run` epochs.
pub fn alternating(a: hypnos_core::Stage, b: hypnos_core::Stage, epochs: usize, run: usize) -> hypnos_core::HypnogramLabels {
    let stages = (0..epochs).map(|i| if (i / run).is_multiple_of(2) { a } else { b }).collect();
    hypnos_core::HypnogramLabels::new(stages, 30).unwrap()
}

/// Preprocessed, encoded and windowed staged recordings.
pub fn staged_dataset(
    config: &hypnos_core::neuralnet::NetworkConfig,
    hyps: &[hypnos_core::HypnogramLabels],
    seed: u64,
) -> Vec<hypnos_core::neuralnet::LabeledRecording> {
    use hypnos_core::{encoding, neuralnet, preprocess, signal_io};
    hyps.iter()
        .enumerate()
        .map(|(i, hyp)| {
            let id = format!("toy{i}");
            let psg = signal_io::synth_staged_recording(&id, hyp, seed + i as u64, 128.0).unwrap();
            let (pp, _) = preprocess::preprocess_recording(&psg, None).unwrap();
            let enc = encoding::encode_recording(&pp, config.encoding).unwrap();
            let windows = neuralnet::windows_from_encoded(&enc, config).unwrap();
            let targets = neuralnet::targets_for_windows(hyp, windows.len(), config.segment_s);
            neuralnet::LabeledRecording { recording_id: id, windows, targets }
        })
        .collect()
}
