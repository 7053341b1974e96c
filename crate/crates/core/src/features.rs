//! The 481-value narcolepsy feature vector.
//!
//! Layout: 31 stage combinations x 15 descriptors of the combination's
//! product series (465 values), then 7 sequencing values from the discrete
//! hypnogram, then 9 transition values from hypnodensity peaks.
//!
//! Sequencing treats unscored epochs as wake.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypnodensity::{Hypnodensity, N_STAGES};
use crate::signal_io::{HypnogramLabels, Stage};

pub const N_COMBOS: usize = 31;
pub const N_DESCRIPTORS: usize = 15;
pub const N_SEQUENCING: usize = 7;
pub const N_TRANSITIONS: usize = 9;
pub const N_FEATURES: usize = N_COMBOS * N_DESCRIPTORS + N_SEQUENCING + N_TRANSITIONS;

pub const CUMULATIVE_PERCENTS: [f64; 6] = [5.0, 10.0, 30.0, 50.0, 70.0, 90.0];
/// Minimum wake/N1 run preceding REM for a sleep-onset REM period.
pub const SOREMP_MIN_WAKE_S: u32 = 150;
/// Sustained N2/N3 run length for a fragmentation event.
pub const SUSTAINED_NREM_S: u32 = 90;
/// Wake/N1 interruption length for a fragmentation event.
pub const INTERRUPTION_S: u32 = 60;
/// Wake/N1 bouts at least this long count as long.
pub const LONG_BOUT_S: u32 = 180;
/// Wake/N1 bouts shorter than this count towards short-wake minutes.
pub const SHORT_BOUT_LIMIT_S: u32 = 900;
/// Night REM latency at or below this many minutes flags a nocturnal SOREMP.
pub const NIGHT_SOREMP_LATENCY_MIN: f64 = 15.0;
/// Peaks below this mass (in 30 s epoch units) are discarded.
pub const PEAK_FLOOR: f64 = 10.0;

pub const DESCRIPTOR_NAMES: [&str; N_DESCRIPTORS] = [
    "mean",
    "max",
    "std",
    "mean_abs_diff",
    "max_abs_diff",
    "entropy",
    "t05_weighted",
    "t10_weighted",
    "t30_weighted",
    "t50_weighted",
    "t70_weighted",
    "t90_weighted",
    "total",
    "frac_above_half_max",
    "upcrossings_per_hour",
];

pub const SEQUENCING_NAMES: [&str; N_SEQUENCING] = [
    "rem_latency_min",
    "sleep_latency_min",
    "soremp_count",
    "soremp_duration_min",
    "nrem_fragmentations",
    "long_wake_bouts",
    "short_wake_min",
];

/// Merged stage types used for transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeakType {
    WN1,
    N2,
    N3,
    Rem,
}

impl PeakType {
    pub const ALL: [PeakType; 4] = [PeakType::WN1, PeakType::N2, PeakType::N3, PeakType::Rem];

    pub fn as_str(self) -> &'static str {
        match self {
            PeakType::WN1 => "WN1",
            PeakType::N2 => "N2",
            PeakType::N3 => "N3",
            PeakType::Rem => "REM",
        }
    }
}

/// The nine transition types, in feature order.
pub const TRANSITIONS: [(PeakType, PeakType); N_TRANSITIONS] = [
    (PeakType::WN1, PeakType::N2),
    (PeakType::WN1, PeakType::Rem),
    (PeakType::N2, PeakType::WN1),
    (PeakType::N2, PeakType::N3),
    (PeakType::N2, PeakType::Rem),
    (PeakType::N3, PeakType::WN1),
    (PeakType::N3, PeakType::N2),
    (PeakType::Rem, PeakType::WN1),
    (PeakType::Rem, PeakType::N2),
];

/// Non-empty subset of the five stages, as a bit mask over stage indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StageCombo(u8);

impl StageCombo {
    pub fn new(stages: &[Stage]) -> Option<Self> {
        let mut mask = 0u8;
        for s in stages {
            mask |= 1 << s.index()?;
        }
        (mask != 0).then_some(StageCombo(mask))
    }

    pub fn members(self) -> Vec<Stage> {
        (0..N_STAGES).filter(|k| self.0 & (1 << k) != 0).map(Stage::from_index).collect()
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn name(self) -> String {
        self.members().iter().map(|s| s.as_str()).collect::<Vec<_>>().join("*")
    }

    /// All 31 combos, by size and then lexicographically in stage order.
    pub fn all() -> Vec<StageCombo> {
        let mut out: Vec<StageCombo> = (1u8..32).map(StageCombo).collect();
        out.sort_by_key(|c| (c.len(), c.members().iter().map(|s| s.index()).collect::<Vec<_>>()));
        out
    }
}

/// Per-segment product of the member stages' probabilities.
pub fn proto_series(hd: &Hypnodensity, combo: StageCombo) -> Vec<f64> {
    let idx: Vec<usize> = combo.members().iter().filter_map(|s| s.index()).collect();
    hd.probs.iter().map(|row| idx.iter().map(|&k| row[k]).product()).collect()
}

/// Minutes (segment end time) at which the running sum first reaches `p`%
/// of the total; 0 when the total is 0.
pub fn time_to_percent(series: &[f64], resolution_s: u32, p: f64) -> f64 {
    let total: f64 = series.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let target = p / 100.0 * total - 1e-12 * total;
    let mut acc = 0.0;
    for (n, v) in series.iter().enumerate() {
        acc += v;
        if acc >= target {
            return (n + 1) as f64 * f64::from(resolution_s) / 60.0;
        }
    }
    series.len() as f64 * f64::from(resolution_s) / 60.0
}

/// The 15 descriptors of one series, in `DESCRIPTOR_NAMES` order.
pub fn combo_descriptors(series: &[f64], resolution_s: u32) -> Result<[f64; N_DESCRIPTORS]> {
    if series.is_empty() {
        return Err(Error::InvalidHypnodensity("empty series".into()));
    }
    let n = series.len() as f64;
    let total: f64 = series.iter().sum();
    let mean = total / n;
    let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let std = (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let diffs: Vec<f64> = series.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let mean_abs_diff = if diffs.is_empty() { 0.0 } else { diffs.iter().sum::<f64>() / diffs.len() as f64 };
    let max_abs_diff = diffs.iter().copied().fold(0.0, f64::max);
    let entropy = if total > 0.0 {
        -series
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|v| {
                let q = v / total;
                q * q.ln()
            })
            .sum::<f64>()
    } else {
        0.0
    };
    let frac_above = if max > 0.0 {
        series.iter().filter(|&&v| v > 0.5 * max).count() as f64 / n
    } else {
        0.0
    };
    let centred: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let upcrossings = centred.windows(2).filter(|w| w[0] < 0.0 && w[1] >= 0.0).count() as f64;
    let hours = n * f64::from(resolution_s) / 3600.0;

    let mut out = [0.0; N_DESCRIPTORS];
    out[0] = mean;
    out[1] = max;
    out[2] = std;
    out[3] = mean_abs_diff;
    out[4] = max_abs_diff;
    out[5] = entropy;
    for (slot, p) in out[6..12].iter_mut().zip(CUMULATIVE_PERCENTS) {
        *slot = time_to_percent(series, resolution_s, p) * total;
    }
    out[12] = total;
    out[13] = frac_above;
    out[14] = upcrossings / hours;
    Ok(out)
}

/// Minutes to 5% of the accumulated `p(W)p(N2) + p(W)p(REM) + p(N2)p(REM)`,
/// weighted by that accumulated sum.
pub fn mixed_stage_onset(hd: &Hypnodensity) -> f64 {
    let series: Vec<f64> = hd.probs.iter().map(|p| p[0] * p[2] + p[0] * p[4] + p[2] * p[4]).collect();
    let total: f64 = series.iter().sum();
    time_to_percent(&series, hd.resolution_s, 5.0) * total
}

/// Coarse classes for run analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RunClass {
    WakeN1,
    Nrem,
    Rem,
}

fn run_class(s: Stage) -> RunClass {
    match s {
        Stage::N2 | Stage::N3 => RunClass::Nrem,
        Stage::Rem => RunClass::Rem,
        Stage::W | Stage::N1 | Stage::Unscored => RunClass::WakeN1,
    }
}

/// Maximal runs as (class, start epoch, length in seconds).
fn runs(hyp: &HypnogramLabels) -> Vec<(RunClass, usize, u32)> {
    let mut out: Vec<(RunClass, usize, u32)> = Vec::new();
    for (i, s) in hyp.stages.iter().enumerate() {
        let c = run_class(*s);
        match out.last_mut() {
            Some(last) if last.0 == c => last.2 += hyp.epoch_s,
            _ => out.push((c, i, hyp.epoch_s)),
        }
    }
    out
}

fn minutes(seconds: u32) -> f64 {
    f64::from(seconds) / 60.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoremReport {
    pub count: usize,
    pub total_duration_min: f64,
    pub rem_latency_min: f64,
    pub sleep_latency_min: f64,
}

/// Latencies and sleep-onset REM periods. Sleep onset is the first epoch
/// that is neither wake nor unscored. Without REM the REM latency runs to
/// the end of the recording; without sleep both latencies equal its length.
pub fn sorem_analysis(hyp: &HypnogramLabels) -> SoremReport {
    let epoch = hyp.epoch_s;
    let total_s = epoch * hyp.len() as u32;
    let onset = hyp.stages.iter().position(|s| !matches!(s, Stage::W | Stage::Unscored));
    let (sleep_latency_s, rem_latency_s) = match onset {
        None => (total_s, total_s),
        Some(o) => {
            let rem = hyp.stages.iter().position(|s| *s == Stage::Rem);
            let onset_s = epoch * o as u32;
            (onset_s, rem.map_or(total_s - onset_s, |r| epoch * r as u32 - onset_s))
        }
    };
    let runs = runs(hyp);
    let (mut count, mut duration_s) = (0, 0);
    for pair in runs.windows(2) {
        let (prev, cur) = (pair[0], pair[1]);
        if cur.0 == RunClass::Rem && prev.0 == RunClass::WakeN1 && prev.2 >= SOREMP_MIN_WAKE_S {
            count += 1;
            duration_s += cur.2;
        }
    }
    SoremReport {
        count,
        total_duration_min: minutes(duration_s),
        rem_latency_min: minutes(rem_latency_s),
        sleep_latency_min: minutes(sleep_latency_s),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fragmentation {
    /// Sustained N2/N3 runs (>= 90 s) directly followed by >= 1 min of W/N1.
    pub nrem_fragmentations: usize,
    /// W/N1 bouts of at least 3 minutes after the first run.
    pub long_wake_bouts: usize,
    /// Minutes in W/N1 bouts shorter than 15 minutes, after the first run.
    pub short_wake_min: f64,
    /// Minutes of REM in runs preceded by more than 2.5 minutes of W/N1.
    pub rem_after_wake_min: f64,
    /// 1 when REM occurs within 15 minutes of sleep onset.
    pub night_soremp: f64,
}

/// Fragmentation and bout statistics. The initial W/N1 run (before sleep)
/// is not a bout.
pub fn fragmentation_features(hyp: &HypnogramLabels) -> Result<Fragmentation> {
    if hyp.epoch_s > SUSTAINED_NREM_S {
        return Err(Error::InvalidEpoch(hyp.epoch_s));
    }
    let runs = runs(hyp);
    let mut f = Fragmentation {
        nrem_fragmentations: 0,
        long_wake_bouts: 0,
        short_wake_min: 0.0,
        rem_after_wake_min: 0.0,
        night_soremp: 0.0,
    };
    for pair in runs.windows(2) {
        let (prev, cur) = (pair[0], pair[1]);
        if prev.0 == RunClass::Nrem && prev.2 >= SUSTAINED_NREM_S && cur.0 == RunClass::WakeN1 && cur.2 >= INTERRUPTION_S {
            f.nrem_fragmentations += 1;
        }
        if cur.0 == RunClass::Rem && prev.0 == RunClass::WakeN1 && prev.2 > SOREMP_MIN_WAKE_S {
            f.rem_after_wake_min += minutes(cur.2);
        }
    }
    for run in runs.iter().filter(|r| r.0 == RunClass::WakeN1 && r.1 > 0) {
        if run.2 >= LONG_BOUT_S {
            f.long_wake_bouts += 1;
        }
        if run.2 < SHORT_BOUT_LIMIT_S {
            f.short_wake_min += minutes(run.2);
        }
    }
    let report = sorem_analysis(hyp);
    let has_rem = hyp.stages.contains(&Stage::Rem);
    if has_rem && report.rem_latency_min <= NIGHT_SOREMP_LATENCY_MIN {
        f.night_soremp = 1.0;
    }
    Ok(f)
}

/// The 7 sequencing values in `SEQUENCING_NAMES` order.
pub fn sequencing_values(hyp: &HypnogramLabels) -> Result<[f64; N_SEQUENCING]> {
    let s = sorem_analysis(hyp);
    let f = fragmentation_features(hyp)?;
    Ok([
        s.rem_latency_min,
        s.sleep_latency_min,
        s.count as f64,
        s.total_duration_min,
        f.nrem_fragmentations as f64,
        f.long_wake_bouts as f64,
        f.short_wake_min,
    ])
}

/// Dominance runs of the merged types, with mass in 30 s epoch units.
pub fn hypnodensity_peaks(hd: &Hypnodensity) -> Vec<(PeakType, f64)> {
    let scale = f64::from(hd.resolution_s) / 30.0;
    let mut peaks: Vec<(PeakType, f64)> = Vec::new();
    for p in &hd.probs {
        let merged = [p[0] + p[1], p[2], p[3], p[4]];
        let mut best = 0;
        for k in 1..4 {
            if merged[k] > merged[best] {
                best = k;
            }
        }
        let kind = PeakType::ALL[best];
        let mass = merged[best] * scale;
        match peaks.last_mut() {
            Some(last) if last.0 == kind => last.1 += mass,
            _ => peaks.push((kind, mass)),
        }
    }
    peaks
}

/// Drops peaks below the floor, merges neighbours of the same type, and sums
/// `sqrt(phi_n * phi_{n+1})` per transition type.
pub fn transition_values_from_peaks(peaks: &[(PeakType, f64)]) -> [f64; N_TRANSITIONS] {
    let mut kept: Vec<(PeakType, f64)> = Vec::new();
    for &(kind, mass) in peaks.iter().filter(|p| p.1 >= PEAK_FLOOR) {
        match kept.last_mut() {
            Some(last) if last.0 == kind => last.1 += mass,
            _ => kept.push((kind, mass)),
        }
    }
    let mut out = [0.0; N_TRANSITIONS];
    for pair in kept.windows(2) {
        if let Some(i) = TRANSITIONS.iter().position(|t| *t == (pair[0].0, pair[1].0)) {
            out[i] += (pair[0].1 * pair[1].1).sqrt();
        }
    }
    out
}

pub fn transition_features(hd: &Hypnodensity) -> [f64; N_TRANSITIONS] {
    transition_values_from_peaks(&hypnodensity_peaks(hd))
}

/// Canonical names of all 481 features.
pub fn feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(N_FEATURES);
    for combo in StageCombo::all() {
        for d in DESCRIPTOR_NAMES {
            names.push(format!("{}.{d}", combo.name()));
        }
    }
    names.extend(SEQUENCING_NAMES.iter().map(|s| s.to_string()));
    names.extend(TRANSITIONS.iter().map(|(a, b)| format!("trans.{}>{}", a.as_str(), b.as_str())));
    names
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub recording_id: String,
    pub values: Vec<f64>,
    pub hla_positive: Option<bool>,
}

/// Builds the full vector from a hypnodensity and its hypnogram.
pub fn assemble(hd: &Hypnodensity, hyp: &HypnogramLabels, hla_positive: Option<bool>) -> Result<FeatureVector> {
    if hd.is_empty() || hyp.is_empty() {
        return Err(Error::InvalidHypnodensity("empty hypnodensity or hypnogram".into()));
    }
    let mut values = Vec::with_capacity(N_FEATURES);
    for combo in StageCombo::all() {
        values.extend(combo_descriptors(&proto_series(hd, combo), hd.resolution_s)?);
    }
    values.extend(sequencing_values(hyp)?);
    values.extend(transition_features(hd));
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidHypnodensity(format!("feature {} is not finite", feature_names()[i])));
    }
    Ok(FeatureVector {
        recording_id: hd.recording_id.clone(),
        values,
        hla_positive,
    })
}

/// CSV with header `recording_id,<481 names>,hla_positive`; HLA is `1`,
/// `0`, or empty.
pub fn to_csv(rows: &[FeatureVector]) -> String {
    let mut out = String::from("recording_id,");
    out.push_str(&feature_names().join(","));
    out.push_str(",hla_positive\n");
    for r in rows {
        out.push_str(&r.recording_id);
        for v in &r.values {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push(',');
        out.push_str(match r.hla_positive {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        });
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<FeatureVector>> {
    let bad = |m: String| Error::CorruptHeader(m);
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| bad("empty feature table".into()))?;
    let expected = format!("recording_id,{},hla_positive", feature_names().join(","));
    if header.trim() != expected {
        return Err(bad("feature table header does not match the canonical names".into()));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != N_FEATURES + 2 {
                return Err(bad(format!("row {} has {} fields", n + 1, fields.len())));
            }
            let values = fields[1..=N_FEATURES]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| bad(format!("row {}: {s:?}: {e}", n + 1))))
                .collect::<Result<Vec<_>>>()?;
            let hla_positive = match fields[N_FEATURES + 1] {
                "1" => Some(true),
                "0" => Some(false),
                "" => None,
                other => return Err(bad(format!("row {}: hla_positive {other:?}", n + 1))),
            };
            Ok(FeatureVector {
                recording_id: fields[0].to_string(),
                values,
                hla_positive,
            })
        })
        .collect()
}

pub fn save_csv(path: &Path, rows: &[FeatureVector]) -> Result<()> {
    fs::write(path, to_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn load_csv(path: &Path) -> Result<Vec<FeatureVector>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}
