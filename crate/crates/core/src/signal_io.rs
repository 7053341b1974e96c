//! Recording and hypnogram file formats, plus deterministic synthetic
//! recordings.
//!
//! A recording on disk is a JSON header `<id>.psgmeta.json` next to one
//! little-endian `f32` blob per channel, `<id>.<ROLE>.f32le`. Hypnograms are
//! plain text: an optional `epoch_s=<int>` header followed by one stage token
//! per line.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const META_SUFFIX: &str = ".psgmeta.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ChannelRole {
    #[serde(rename = "EEG_C_LEFT")]
    EegCLeft,
    #[serde(rename = "EEG_C_RIGHT")]
    EegCRight,
    #[serde(rename = "EEG_O_LEFT")]
    EegOLeft,
    #[serde(rename = "EEG_O_RIGHT")]
    EegORight,
    #[serde(rename = "EOG_L")]
    EogL,
    #[serde(rename = "EOG_R")]
    EogR,
    #[serde(rename = "EMG_CHIN")]
    EmgChin,
}

impl ChannelRole {
    pub const ALL: [ChannelRole; 7] = [
        ChannelRole::EegCLeft,
        ChannelRole::EegCRight,
        ChannelRole::EegOLeft,
        ChannelRole::EegORight,
        ChannelRole::EogL,
        ChannelRole::EogR,
        ChannelRole::EmgChin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelRole::EegCLeft => "EEG_C_LEFT",
            ChannelRole::EegCRight => "EEG_C_RIGHT",
            ChannelRole::EegOLeft => "EEG_O_LEFT",
            ChannelRole::EegORight => "EEG_O_RIGHT",
            ChannelRole::EogL => "EOG_L",
            ChannelRole::EogR => "EOG_R",
            ChannelRole::EmgChin => "EMG_CHIN",
        }
    }

    pub fn is_central_eeg(self) -> bool {
        matches!(self, ChannelRole::EegCLeft | ChannelRole::EegCRight)
    }

    pub fn is_occipital_eeg(self) -> bool {
        matches!(self, ChannelRole::EegOLeft | ChannelRole::EegORight)
    }
}

impl fmt::Display for ChannelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChannelRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ChannelRole::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::CorruptHeader(format!("unknown channel role {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    /// Samples in microvolts.
    pub samples: Vec<f32>,
    pub fs: f64,
}

impl Channel {
    pub fn new(samples: Vec<f32>, fs: f64) -> Self {
        Channel { samples, fs }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&v| v as f64).collect()
    }
}

/// A multi-channel raw recording.
#[derive(Debug, Clone, PartialEq)]
pub struct PolySignalSet {
    pub recording_id: String,
    pub duration_s: f64,
    pub channels: BTreeMap<ChannelRole, Channel>,
}

impl PolySignalSet {
    pub fn channel(&self, role: ChannelRole) -> Result<&Channel> {
        self.channels.get(&role).ok_or(Error::MissingChannel(role))
    }

    /// Checks sample rate and length of every present channel.
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::CorruptHeader(format!(
                "duration_s must be positive, got {}",
                self.duration_s
            )));
        }
        for (&role, ch) in &self.channels {
            if !(ch.fs > 0.0) || !ch.fs.is_finite() {
                return Err(Error::CorruptHeader(format!("{role}: fs must be positive")));
            }
            let expected = (ch.fs * self.duration_s).round() as usize;
            if ch.samples.len().abs_diff(expected) > 1 {
                return Err(Error::LengthMismatch {
                    role,
                    expected,
                    found: ch.samples.len(),
                });
            }
        }
        Ok(())
    }

    /// Checks the montage needed by the full pipeline: a central EEG, both
    /// EOGs and the chin EMG.
    pub fn require_full_montage(&self) -> Result<()> {
        if !self.channels.keys().any(|r| r.is_central_eeg()) {
            return Err(Error::MissingChannel(ChannelRole::EegCLeft));
        }
        for role in [ChannelRole::EogL, ChannelRole::EogR, ChannelRole::EmgChin] {
            if !self.channels.contains_key(&role) {
                return Err(Error::MissingChannel(role));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordingHeader {
    recording_id: String,
    duration_s: f64,
    channels: Vec<ChannelHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelHeader {
    role: ChannelRole,
    fs: f64,
    n_samples: usize,
    file: String,
}

/// Path of the header file for `recording_id` inside `dir`.
pub fn meta_path(dir: &Path, recording_id: &str) -> PathBuf {
    dir.join(format!("{recording_id}{META_SUFFIX}"))
}

/// Writes a recording as header + per-channel blobs; returns the header path.
pub fn save_recording(dir: &Path, psg: &PolySignalSet) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut channels = Vec::with_capacity(psg.channels.len());
    for (&role, ch) in &psg.channels {
        let file = format!("{}.{}.f32le", psg.recording_id, role);
        write_f32le(&dir.join(&file), &ch.samples)?;
        channels.push(ChannelHeader {
            role,
            fs: ch.fs,
            n_samples: ch.samples.len(),
            file,
        });
    }
    let header = RecordingHeader {
        recording_id: psg.recording_id.clone(),
        duration_s: psg.duration_s,
        channels,
    };
    let path = meta_path(dir, &psg.recording_id);
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads every channel declared by the header and validates the full-pipeline
/// montage.
pub fn load_recording(path: &Path) -> Result<PolySignalSet> {
    let psg = load_recording_partial(path)?;
    psg.require_full_montage()?;
    Ok(psg)
}

/// Like [`load_recording`] without the montage requirement.
pub fn load_recording_partial(path: &Path) -> Result<PolySignalSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: RecordingHeader =
        serde_json::from_str(&text).map_err(|e| Error::CorruptHeader(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut channels = BTreeMap::new();
    for ch in header.channels {
        if channels.contains_key(&ch.role) {
            return Err(Error::CorruptHeader(format!("channel {} declared twice", ch.role)));
        }
        let samples = read_f32le(&dir.join(&ch.file))?;
        if samples.len() != ch.n_samples {
            return Err(Error::LengthMismatch {
                role: ch.role,
                expected: ch.n_samples,
                found: samples.len(),
            });
        }
        channels.insert(ch.role, Channel::new(samples, ch.fs));
    }
    let psg = PolySignalSet {
        recording_id: header.recording_id,
        duration_s: header.duration_s,
        channels,
    };
    psg.validate()?;
    Ok(psg)
}

pub fn write_f32le(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32le(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::CorruptHeader(format!(
            "{}: blob length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// One sinusoidal component of a synthetic channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tone {
    pub freq_hz: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSynth {
    pub role: ChannelRole,
    pub fs: f64,
    pub tones: Vec<Tone>,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub recording_id: String,
    pub channels: Vec<ChannelSynth>,
}

/// Sum of sinusoids plus white Gaussian noise per channel. Pure in
/// `(spec, seed, duration_s)`.
pub fn synth_recording(spec: &SynthSpec, seed: u64, duration_s: f64) -> Result<PolySignalSet> {
    if !(duration_s > 0.0) {
        return Err(Error::InvalidSpec(format!("duration_s must be positive, got {duration_s}")));
    }
    let mut channels = BTreeMap::new();
    for ch in &spec.channels {
        if !(ch.fs > 0.0) {
            return Err(Error::InvalidSpec(format!("{}: fs must be positive", ch.role)));
        }
        if ch.noise_sigma < 0.0 || !ch.noise_sigma.is_finite() {
            return Err(Error::InvalidSpec(format!("{}: negative noise sigma", ch.role)));
        }
        if let Some(t) = ch.tones.iter().find(|t| t.amplitude < 0.0 || !t.amplitude.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "{}: negative amplitude {}",
                ch.role, t.amplitude
            )));
        }
        let n = (ch.fs * duration_s).round() as usize;
        // Each channel draws from its own stream so adding a channel never
        // perturbs the others.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ch.role as u64 + 1);
        let noise = Normal::new(0.0, ch.noise_sigma.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::InvalidSpec(e.to_string()))?;
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / ch.fs;
                let mut v: f64 = ch
                    .tones
                    .iter()
                    .map(|tone| tone.amplitude * (2.0 * std::f64::consts::PI * tone.freq_hz * t).sin())
                    .sum();
                if ch.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                v as f32
            })
            .collect();
        if channels.insert(ch.role, Channel::new(samples, ch.fs)).is_some() {
            return Err(Error::InvalidSpec(format!("channel {} given twice", ch.role)));
        }
    }
    Ok(PolySignalSet {
        recording_id: spec.recording_id.clone(),
        duration_s,
        channels,
    })
}

/// Stage-typical tones (Hz, µV) and noise σ for one channel role.
fn stage_profile(stage: Stage, role: ChannelRole) -> (&'static [(f64, f64)], f64) {
    use ChannelRole::*;
    match (stage, role) {
        (Stage::N1, EegCLeft | EegCRight | EegOLeft | EegORight) => (&[(6.0, 20.0), (2.0, 10.0)], 5.0),
        (Stage::N2, EegCLeft | EegCRight | EegOLeft | EegORight) => (&[(13.0, 15.0), (3.0, 25.0)], 5.0),
        (Stage::N3, EegCLeft | EegCRight | EegOLeft | EegORight) => (&[(1.0, 80.0), (2.5, 20.0)], 5.0),
        (Stage::Rem, EegCLeft | EegCRight | EegOLeft | EegORight) => (&[(6.0, 15.0), (20.0, 5.0)], 5.0),
        (_, EegCLeft | EegCRight | EegOLeft | EegORight) => (&[(10.0, 20.0), (20.0, 5.0)], 5.0),
        (Stage::N1, EogL | EogR) => (&[(0.2, 30.0)], 5.0),
        (Stage::N2, EogL | EogR) => (&[(0.1, 5.0)], 5.0),
        (Stage::N3, EogL | EogR) => (&[(1.0, 30.0)], 5.0),
        (Stage::Rem, EogL | EogR) => (&[(1.5, 50.0)], 5.0),
        (_, EogL | EogR) => (&[(0.3, 60.0)], 5.0),
        (Stage::N1, EmgChin) => (&[], 10.0),
        (Stage::N2, EmgChin) => (&[], 6.0),
        (Stage::N3, EmgChin) => (&[], 5.0),
        (Stage::Rem, EmgChin) => (&[], 2.0),
        (_, EmgChin) => (&[], 20.0),
    }
}

/// Full-montage recording whose per-epoch content follows `hypnogram`:
/// alpha and high chin tone in wake, theta in N1, spindle-band activity in
/// N2, high-amplitude delta in N3, and rapid eye movements with atonia in
/// REM. The right EOG is the mirror of the left. Pure in its arguments.
pub fn synth_staged_recording(recording_id: &str, hypnogram: &HypnogramLabels, seed: u64, fs: f64) -> Result<PolySignalSet> {
    if !(fs > 0.0) {
        return Err(Error::InvalidSpec(format!("fs must be positive, got {fs}")));
    }
    if hypnogram.is_empty() {
        return Err(Error::EmptyFile);
    }
    let duration_s = hypnogram.duration_s();
    let n = (fs * duration_s).round() as usize;
    let epoch_len = f64::from(hypnogram.epoch_s);
    let roles = [
        ChannelRole::EegCLeft,
        ChannelRole::EegOLeft,
        ChannelRole::EogL,
        ChannelRole::EogR,
        ChannelRole::EmgChin,
    ];
    let mut channels = BTreeMap::new();
    for role in roles {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(role as u64 + 1);
        let sign = if role == ChannelRole::EogR { -1.0 } else { 1.0 };
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / fs;
                let epoch = ((t / epoch_len) as usize).min(hypnogram.len() - 1);
                let (tones, sigma) = stage_profile(hypnogram.stages[epoch], role);
                let tone: f64 = tones
                    .iter()
                    .map(|(f, a)| a * (2.0 * std::f64::consts::PI * f * t).sin())
                    .sum();
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                (sign * tone + sigma * z) as f32
            })
            .collect();
        channels.insert(role, Channel::new(samples, fs));
    }
    Ok(PolySignalSet {
        recording_id: recording_id.to_string(),
        duration_s,
        channels,
    })
}

/// Random hypnogram from a sticky Markov chain over the scored stages,
/// starting awake.
pub fn synth_hypnogram(n_epochs: usize, epoch_s: u32, seed: u64) -> Result<HypnogramLabels> {
    // Typical successor stages; the current stage is kept with probability 0.85.
    const NEXT: [&[Stage]; 5] = [
        &[Stage::N1, Stage::N1, Stage::N2],
        &[Stage::W, Stage::N2, Stage::N2, Stage::Rem],
        &[Stage::N1, Stage::N3, Stage::N3, Stage::Rem, Stage::W],
        &[Stage::N2],
        &[Stage::W, Stage::N1, Stage::N2],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stage = Stage::W;
    let stages = (0..n_epochs)
        .map(|_| {
            let current = stage;
            if rng.random_bool(0.15) {
                let options = NEXT[current.index().expect("scored")];
                stage = options[rng.random_range(0..options.len())];
            }
            current
        })
        .collect();
    HypnogramLabels::new(stages, epoch_s)
}

/// Sleep stage of one scored epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    W,
    N1,
    N2,
    N3,
    #[serde(rename = "REM")]
    Rem,
    #[serde(rename = "UNSCORED")]
    Unscored,
}

impl Stage {
    /// The five scored stages in canonical order. This order is also the
    /// tie-break order everywhere an argmax is taken.
    pub const SCORED: [Stage; 5] = [Stage::W, Stage::N1, Stage::N2, Stage::N3, Stage::Rem];

    pub fn index(self) -> Option<usize> {
        match self {
            Stage::W => Some(0),
            Stage::N1 => Some(1),
            Stage::N2 => Some(2),
            Stage::N3 => Some(3),
            Stage::Rem => Some(4),
            Stage::Unscored => None,
        }
    }

    pub fn from_index(i: usize) -> Stage {
        Stage::SCORED.get(i).copied().unwrap_or(Stage::Unscored)
    }

    pub fn is_scored(self) -> bool {
        self != Stage::Unscored
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::W => "W",
            Stage::N1 => "N1",
            Stage::N2 => "N2",
            Stage::N3 => "N3",
            Stage::Rem => "REM",
            Stage::Unscored => "UNSCORED",
        }
    }

    /// Parses a stage token; anything unrecognized is `Unscored`.
    pub fn parse_token(token: &str) -> Stage {
        match token.trim() {
            "W" => Stage::W,
            "N1" => Stage::N1,
            "N2" => Stage::N2,
            "N3" => Stage::N3,
            "REM" => Stage::Rem,
            _ => Stage::Unscored,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const ALLOWED_EPOCH_S: [u32; 4] = [5, 10, 15, 30];
pub const DEFAULT_EPOCH_S: u32 = 30;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HypnogramLabels {
    pub stages: Vec<Stage>,
    pub epoch_s: u32,
}

impl HypnogramLabels {
    pub fn new(stages: Vec<Stage>, epoch_s: u32) -> Result<Self> {
        if !ALLOWED_EPOCH_S.contains(&epoch_s) {
            return Err(Error::InvalidEpoch(epoch_s));
        }
        if stages.is_empty() {
            return Err(Error::EmptyFile);
        }
        Ok(HypnogramLabels { stages, epoch_s })
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.stages.len() as f64 * self.epoch_s as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("epoch_s={}\n", self.epoch_s);
        for s in &self.stages {
            out.push_str(s.as_str());
            out.push('\n');
        }
        out
    }
}

impl FromStr for HypnogramLabels {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut epoch_s = DEFAULT_EPOCH_S;
        let mut stages = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(v) = line.strip_prefix("epoch_s=") {
                if i != 0 && !stages.is_empty() {
                    return Err(Error::CorruptHeader("epoch_s header after stage tokens".into()));
                }
                epoch_s = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::CorruptHeader(format!("bad epoch_s value {v:?}")))?;
                continue;
            }
            stages.push(Stage::parse_token(line));
        }
        HypnogramLabels::new(stages, epoch_s)
    }
}

pub fn load_hypnogram(path: &Path) -> Result<HypnogramLabels> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.parse()
}

pub fn save_hypnogram(path: &Path, hyp: &HypnogramLabels) -> Result<()> {
    fs::write(path, hyp.to_text()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn five_channel_spec(fs: f64) -> SynthSpec {
        let roles = [
            ChannelRole::EegCLeft,
            ChannelRole::EogL,
            ChannelRole::EogR,
            ChannelRole::EmgChin,
            ChannelRole::EegOLeft,
        ];
        SynthSpec {
            recording_id: "rec".into(),
            channels: roles
                .iter()
                .map(|&role| ChannelSynth {
                    role,
                    fs,
                    tones: vec![Tone { freq_hz: 10.0, amplitude: 20.0 }],
                    noise_sigma: 3.0,
                })
                .collect(),
        }
    }

    #[test]
    fn five_channels_at_256_hz_for_a_minute() {
        let dir = tempfile::tempdir().unwrap();
        let psg = synth_recording(&five_channel_spec(256.0), 1, 60.0).unwrap();
        let path = save_recording(dir.path(), &psg).unwrap();
        let loaded = load_recording(&path).unwrap();
        assert_eq!(loaded.channels.len(), 5);
        for ch in loaded.channels.values() {
            assert_eq!(ch.samples.len(), 15360);
        }
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let psg = synth_recording(&five_channel_spec(200.0), 9, 12.5).unwrap();
        let loaded = load_recording(&save_recording(dir.path(), &psg).unwrap()).unwrap();
        assert_eq!(loaded, psg);
        for (a, b) in psg.channels.values().zip(loaded.channels.values()) {
            assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn missing_eog_r_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = five_channel_spec(100.0);
        spec.channels.retain(|c| c.role != ChannelRole::EogR);
        let psg = synth_recording(&spec, 1, 10.0).unwrap();
        let path = save_recording(dir.path(), &psg).unwrap();
        match load_recording(&path) {
            Err(Error::MissingChannel(ChannelRole::EogR)) => {}
            other => panic!("expected MissingChannel(EOG_R), got {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_is_a_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let psg = synth_recording(&five_channel_spec(100.0), 1, 10.0).unwrap();
        let path = save_recording(dir.path(), &psg).unwrap();
        let blob = dir.path().join("rec.EOG_L.f32le");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 40]).unwrap();
        assert!(matches!(load_recording(&path), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn garbage_header_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.psgmeta.json");
        std::fs::write(&path, "{\"recording_id\": 3}").unwrap();
        assert!(matches!(load_recording(&path), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn pure_tone_matches_definition() {
        let spec = SynthSpec {
            recording_id: "t".into(),
            channels: vec![ChannelSynth {
                role: ChannelRole::EegCLeft,
                fs: 100.0,
                tones: vec![Tone { freq_hz: 10.0, amplitude: 50.0 }],
                noise_sigma: 0.0,
            }],
        };
        let psg = synth_recording(&spec, 0, 2.0).unwrap();
        let x = &psg.channels[&ChannelRole::EegCLeft].samples;
        for (n, &v) in x.iter().enumerate() {
            let expect = 50.0 * (2.0 * std::f64::consts::PI * 10.0 * n as f64 / 100.0).sin();
            assert!((v as f64 - expect).abs() < 1e-4, "n={n}");
        }
    }

    #[test]
    fn synthesis_is_deterministic_per_seed() {
        let spec = five_channel_spec(100.0);
        let a = synth_recording(&spec, 42, 30.0).unwrap();
        let b = synth_recording(&spec, 42, 30.0).unwrap();
        let c = synth_recording(&spec, 43, 30.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_variance_follows_sigma() {
        let spec = SynthSpec {
            recording_id: "n".into(),
            channels: vec![ChannelSynth {
                role: ChannelRole::EmgChin,
                fs: 100.0,
                tones: vec![],
                noise_sigma: 10.0,
            }],
        };
        let psg = synth_recording(&spec, 5, 600.0).unwrap();
        let x = psg.channels[&ChannelRole::EmgChin].to_f64();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
        assert!((var - 100.0).abs() < 5.0, "variance {var}");
    }

    #[test]
    fn negative_amplitude_or_sigma_rejected() {
        let mut spec = five_channel_spec(100.0);
        spec.channels[0].noise_sigma = -1.0;
        assert!(matches!(synth_recording(&spec, 1, 1.0), Err(Error::InvalidSpec(_))));
        let mut spec = five_channel_spec(100.0);
        spec.channels[1].tones[0].amplitude = -2.0;
        assert!(matches!(synth_recording(&spec, 1, 1.0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn hypnogram_tokens() {
        let h: HypnogramLabels = "W\nN1\nN2".parse().unwrap();
        assert_eq!(h.stages, vec![Stage::W, Stage::N1, Stage::N2]);
        assert_eq!(h.epoch_s, 30);

        let h: HypnogramLabels = "epoch_s=5\nREM\nX?\nN3\n".parse().unwrap();
        assert_eq!(h.epoch_s, 5);
        assert_eq!(h.stages, vec![Stage::Rem, Stage::Unscored, Stage::N3]);
    }

    #[test]
    fn empty_hypnogram_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.txt");
        std::fs::write(&path, "epoch_s=30\n\n").unwrap();
        assert!(matches!(load_hypnogram(&path), Err(Error::EmptyFile)));
    }

    #[test]
    fn bad_epoch_length() {
        assert!(matches!("epoch_s=20\nW".parse::<HypnogramLabels>(), Err(Error::InvalidEpoch(20))));
    }

    #[test]
    fn hypnogram_text_round_trip() {
        let h = HypnogramLabels::new(vec![Stage::W, Stage::Rem, Stage::N3], 15).unwrap();
        let back: HypnogramLabels = h.to_text().parse().unwrap();
        assert_eq!(back, h);
    }
}
