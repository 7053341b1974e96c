//! Octave and cross-correlation (CC) encodings of preprocessed channels.
//!
//! Octave encoding splits each channel into five nested low-pass bands and
//! log-modulus scales each band against a robust 95th percentile. CC
//! encoding correlates short hop-aligned segments against a centered,
//! twice-as-long window of the same channel (or, for the EOG cross term, the
//! opposite eye) and scales each correlation function by its own peak.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{FilterSpec, TARGET_FS};
use crate::signal_io::{read_f32le, write_f32le, ChannelRole, PolySignalSet};

pub const OCTAVE_CUTOFFS_HZ: [f64; 5] = [49.0, 25.0, 12.5, 6.25, 3.125];
pub const OCTAVE_FILTER_ORDER: usize = 5;
pub const P95_WINDOW_S: f64 = 90.0 * 60.0;
pub const P95_HOP_S: f64 = P95_WINDOW_S / 2.0;
pub const P95_PERCENTILE: f64 = 95.0;
pub const MODE_BINS: usize = 64;
/// Common time grid all CC modalities are aligned to.
pub const GRID_HOP_S: f64 = 0.25;

/// Segment, hop and extension lengths for one CC modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CcParams {
    pub segment_s: f64,
    pub hop_s: f64,
    pub extension_s: f64,
}

impl CcParams {
    pub const EOG: CcParams = CcParams { segment_s: 4.0, hop_s: 0.25, extension_s: 8.0 };
    pub const EMG: CcParams = CcParams { segment_s: 0.4, hop_s: 0.15, extension_s: 0.8 };
    pub const EEG: CcParams = CcParams { segment_s: 2.0, hop_s: 0.25, extension_s: 4.0 };

    pub fn overlap_s(&self) -> f64 {
        self.segment_s - self.hop_s
    }

    pub fn validate(&self) -> Result<()> {
        if 0.0 < self.hop_s && self.hop_s <= self.segment_s && self.segment_s < self.extension_s {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "cc params need 0 < hop <= segment < extension, got {self:?}"
            )))
        }
    }

    fn samples(&self, fs: f64) -> (usize, usize, usize) {
        let s = |t: f64| (t * fs).round() as usize;
        (s(self.segment_s), s(self.hop_s), s(self.extension_s))
    }
}

/// Linear-interpolated percentile of `values` (sorted copy).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Mode of continuous values via a 64-bin histogram over `[min, max]`.
/// Ties go to the lower bin; the representative is the lower median of the
/// values inside the winning bin.
pub fn histogram_mode(values: &[f64]) -> f64 {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if max == min {
        return min;
    }
    let bin_of = |v: f64| (((v - min) / (max - min) * MODE_BINS as f64) as usize).min(MODE_BINS - 1);
    let mut counts = [0usize; MODE_BINS];
    for &v in values {
        counts[bin_of(v)] += 1;
    }
    let mut best = 0;
    for b in 1..MODE_BINS {
        if counts[b] > counts[best] {
            best = b;
        }
    }
    let mut members: Vec<f64> = values.iter().copied().filter(|&v| bin_of(v) == best).collect();
    members.sort_by(f64::total_cmp);
    members[(members.len() - 1) / 2]
}

/// Robust scaling reference: the mode of the 95th percentiles of `|x|` over
/// 50%-overlapping 90-minute windows. Recordings shorter than one window use
/// the global 95th percentile.
pub fn robust_p95(x: &[f64], fs: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::EmptySignal);
    }
    let abs: Vec<f64> = x.iter().map(|v| v.abs()).collect();
    let win = (P95_WINDOW_S * fs).round() as usize;
    let hop = (P95_HOP_S * fs).round() as usize;
    if abs.len() < win {
        return Ok(percentile(&abs, P95_PERCENTILE));
    }
    let per_window: Vec<f64> = (0..)
        .map(|k| k * hop)
        .take_while(|&start| start + win <= abs.len())
        .map(|start| percentile(&abs[start..start + win], P95_PERCENTILE))
        .collect();
    Ok(histogram_mode(&per_window))
}

/// `sign(x) * ln(|x| / p95 + 1)`, elementwise.
pub fn log_modulus_scale(x: &[f64], p95: f64) -> Result<Vec<f64>> {
    if !(p95 > 0.0) || !p95.is_finite() {
        return Err(Error::NonpositiveP95(p95));
    }
    Ok(x.iter().map(|&v| v.signum() * (v.abs() / p95 + 1.0).ln()).collect())
}

/// The five nested low-pass bands, unscaled. Each band is the previous band
/// low-passed again; no high-pass is applied anywhere.
pub fn octave_bands(x: &[f64], fs: f64) -> Result<[Vec<f64>; 5]> {
    let mut bands: [Vec<f64>; 5] = Default::default();
    let mut prev = x.to_vec();
    for (band, &fc) in bands.iter_mut().zip(&OCTAVE_CUTOFFS_HZ) {
        prev = FilterSpec::lowpass(OCTAVE_FILTER_ORDER, fc).apply(&prev, fs)?;
        *band = prev.clone();
    }
    Ok(bands)
}

/// Scales a band by its robust 95th percentile. A band whose percentile is
/// zero falls back to its peak magnitude; an all-zero band stays zero.
fn scale_band(band: &[f64], fs: f64) -> Result<Vec<f64>> {
    let mut p95 = robust_p95(band, fs)?;
    if p95 == 0.0 {
        p95 = band.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    }
    if p95 == 0.0 {
        return Ok(vec![0.0; band.len()]);
    }
    log_modulus_scale(band, p95)
}

/// Octave encoding of one channel: five scaled bands.
pub fn octave_encode(x: &[f64], fs: f64) -> Result<[Vec<f64>; 5]> {
    let bands = octave_bands(x, fs)?;
    let mut out: [Vec<f64>; 5] = Default::default();
    for (o, b) in out.iter_mut().zip(&bands) {
        *o = scale_band(b, fs)?;
    }
    Ok(out)
}

/// Row-major matrix of correlation functions, one row per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct CcMatrix {
    pub n_rows: usize,
    pub n_lags: usize,
    /// Column holding the zero-lag value.
    pub zero_lag: usize,
    pub data: Vec<f64>,
}

impl CcMatrix {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.n_lags..(r + 1) * self.n_lags]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.n_lags..(r + 1) * self.n_lags]
    }
}

/// Raw correlation of every hop-aligned segment with its centered extension.
///
/// For segment `s` of length `L` starting at `j * hop` and extension `e` of
/// length `E` centered on it (zero-padded past the recording edges),
/// `gamma[k] = sum_n s[n] * e[n + k] / L` for `k in 0..=E-L`. The extension
/// comes from `opposite` when given.
pub fn cc_segment(x: &[f64], fs: f64, params: CcParams, opposite: Option<&[f64]>) -> Result<CcMatrix> {
    params.validate()?;
    let (seg, hop, ext) = params.samples(fs);
    if x.len() < ext {
        return Err(Error::SignalTooShort { len: x.len(), min: ext });
    }
    let other = opposite.unwrap_or(x);
    if other.len() != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "opposite channel has {} samples, expected {}",
            other.len(),
            x.len()
        )));
    }
    let n_rows = (x.len() - seg) / hop + 1;
    let n_lags = ext - seg + 1;
    let lead = (ext - seg) / 2;
    // Zero-padded copy of the extension source so every window is in range.
    let mut padded = vec![0.0; lead];
    padded.extend_from_slice(other);
    padded.resize(padded.len() + ext, 0.0);

    let mut out = CcMatrix {
        n_rows,
        n_lags,
        zero_lag: lead,
        data: vec![0.0; n_rows * n_lags],
    };
    let norm = 1.0 / seg as f64;
    for r in 0..n_rows {
        let start = r * hop;
        let s = &x[start..start + seg];
        // extension starts at start - lead in signal coordinates, i.e. at
        // `start` in padded coordinates
        let e = &padded[start..start + ext];
        let row = out.row_mut(r);
        for (k, g) in row.iter_mut().enumerate() {
            let window = &e[k..k + seg];
            *g = s.iter().zip(window).map(|(a, b)| a * b).sum::<f64>() * norm;
        }
    }
    Ok(out)
}

/// `gamma * ln(1 + max|gamma|) / max|gamma|`; all-zero input stays zero.
pub fn cc_scale(gamma: &[f64]) -> Vec<f64> {
    let peak = gamma.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return vec![0.0; gamma.len()];
    }
    let factor = (1.0 + peak).ln() / peak;
    gamma.iter().map(|g| g * factor).collect()
}

fn scale_rows(m: &mut CcMatrix) {
    for r in 0..m.n_rows {
        let row = m.row_mut(r);
        let scaled = cc_scale(row);
        row.copy_from_slice(&scaled);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingMode {
    Octave,
    Cc,
}

impl std::str::FromStr for EncodingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "octave" => Ok(EncodingMode::Octave),
            "cc" => Ok(EncodingMode::Cc),
            other => Err(Error::InvalidConfig(format!("unknown encoding mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for EncodingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncodingMode::Octave => "octave",
            EncodingMode::Cc => "cc",
        })
    }
}

/// Named row-major tensor stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {name}: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Tensor { name, shape, data })
    }
}

/// Encoded modalities of one recording.
///
/// Octave mode holds `EEG`, `EOG`, `EMG` tensors shaped `[channels, samples]`
/// at 100 Hz. CC mode holds `EEG`, `EOG_L`, `EOG_R`, `EOG_X`, `EMG` tensors
/// shaped `[grid_rows, lags]` on a shared 0.25 s grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedRecording {
    pub recording_id: String,
    pub mode: EncodingMode,
    pub duration_s: f64,
    pub tensors: Vec<Tensor>,
}

impl EncodedRecording {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::ShapeMismatch(format!("encoded recording has no {name} tensor")))
    }

    /// Grid time (s) of the centre of CC row `r`.
    pub fn cc_row_center_s(r: usize) -> f64 {
        r as f64 * GRID_HOP_S + CcParams::EOG.segment_s / 2.0
    }
}

fn channel_f64(psg: &PolySignalSet, role: ChannelRole) -> Result<Vec<f64>> {
    let ch = psg.channel(role)?;
    if ch.fs != TARGET_FS {
        return Err(Error::InvalidConfig(format!(
            "{role} is at {} Hz; encoding expects preprocessed 100 Hz input",
            ch.fs
        )));
    }
    Ok(ch.to_f64())
}

fn central_eeg(psg: &PolySignalSet) -> Result<ChannelRole> {
    [ChannelRole::EegCLeft, ChannelRole::EegCRight]
        .into_iter()
        .find(|r| psg.channels.contains_key(r))
        .ok_or(Error::MissingChannel(ChannelRole::EegCLeft))
}

fn occipital_eeg(psg: &PolySignalSet) -> Option<ChannelRole> {
    [ChannelRole::EegOLeft, ChannelRole::EegORight]
        .into_iter()
        .find(|r| psg.channels.contains_key(r))
}

fn stack(name: &str, rows: &[Vec<f64>]) -> Result<Tensor> {
    let len = rows.first().map_or(0, Vec::len);
    let data = rows.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect();
    Tensor::new(name, vec![rows.len(), len], data)
}

/// Picks, for every grid row, the row of `m` whose segment centre is nearest
/// the grid row's centre.
fn align_to_grid(m: &CcMatrix, params: CcParams, grid_rows: usize, name: &str) -> Result<Tensor> {
    let mut data = Vec::with_capacity(grid_rows * m.n_lags);
    for g in 0..grid_rows {
        let centre = EncodedRecording::cc_row_center_s(g);
        let idx = ((centre - params.segment_s / 2.0) / params.hop_s).round().max(0.0) as usize;
        let idx = idx.min(m.n_rows - 1);
        data.extend(m.row(idx).iter().map(|&v| v as f32));
    }
    Tensor::new(name, vec![grid_rows, m.n_lags], data)
}

/// Encodes a preprocessed recording (100 Hz, one EEG per site).
pub fn encode_recording(psg: &PolySignalSet, mode: EncodingMode) -> Result<EncodedRecording> {
    psg.require_full_montage()?;
    let fs = TARGET_FS;
    let eeg_c = channel_f64(psg, central_eeg(psg)?)?;
    let eog_l = channel_f64(psg, ChannelRole::EogL)?;
    let eog_r = channel_f64(psg, ChannelRole::EogR)?;
    let emg = channel_f64(psg, ChannelRole::EmgChin)?;

    let tensors = match mode {
        EncodingMode::Octave => {
            let mut eeg_rows = octave_encode(&eeg_c, fs)?.to_vec();
            if let Some(role) = occipital_eeg(psg) {
                eeg_rows.extend(octave_encode(&channel_f64(psg, role)?, fs)?);
            }
            let mut eog_rows = octave_encode(&eog_l, fs)?.to_vec();
            eog_rows.extend(octave_encode(&eog_r, fs)?);
            let emg_rows = octave_encode(&emg, fs)?.to_vec();
            vec![stack("EEG", &eeg_rows)?, stack("EOG", &eog_rows)?, stack("EMG", &emg_rows)?]
        }
        EncodingMode::Cc => {
            let mut mats = [
                ("EEG", CcParams::EEG, cc_segment(&eeg_c, fs, CcParams::EEG, None)?),
                ("EOG_L", CcParams::EOG, cc_segment(&eog_l, fs, CcParams::EOG, None)?),
                ("EOG_R", CcParams::EOG, cc_segment(&eog_r, fs, CcParams::EOG, None)?),
                ("EOG_X", CcParams::EOG, cc_segment(&eog_l, fs, CcParams::EOG, Some(&eog_r))?),
                ("EMG", CcParams::EMG, cc_segment(&emg, fs, CcParams::EMG, None)?),
            ];
            let grid_rows = mats[1].2.n_rows;
            mats.iter_mut()
                .map(|(name, params, m)| {
                    scale_rows(m);
                    align_to_grid(m, *params, grid_rows, name)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(EncodedRecording {
        recording_id: psg.recording_id.clone(),
        mode,
        duration_s: psg.duration_s,
        tensors,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodedManifest {
    recording_id: String,
    mode: EncodingMode,
    duration_s: f64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

pub const ENCODED_SUFFIX: &str = ".encoded.json";

/// Writes the JSON manifest and one `.f32le` blob per tensor; returns the
/// manifest path.
pub fn save_encoded(dir: &Path, enc: &EncodedRecording) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for t in &enc.tensors {
        let file = format!("{}.enc.{}.f32le", enc.recording_id, t.name);
        write_f32le(&dir.join(&file), &t.data)?;
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            file,
        });
    }
    let manifest = EncodedManifest {
        recording_id: enc.recording_id.clone(),
        mode: enc.mode,
        duration_s: enc.duration_s,
        tensors: entries,
    };
    let path = dir.join(format!("{}{ENCODED_SUFFIX}", enc.recording_id));
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_encoded(path: &Path) -> Result<EncodedRecording> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: EncodedManifest =
        serde_json::from_str(&text).map_err(|e| Error::CorruptHeader(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tensors = manifest
        .tensors
        .into_iter()
        .map(|t| Tensor::new(t.name, t.shape, read_f32le(&dir.join(&t.file))?))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedRecording {
        recording_id: manifest.recording_id,
        mode: manifest.mode,
        duration_s: manifest.duration_s,
        tensors,
    })
}
