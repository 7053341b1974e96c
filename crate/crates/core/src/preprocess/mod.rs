//! Channel conditioning: rate normalization, band limiting and EEG channel
//! quality selection.
//!
//! Every channel is brought to 100 Hz and then passed through a zero-phase
//! 5th-order Butterworth high-pass at 0.2 Hz followed by a zero-phase
//! 5th-order low-pass at 49 Hz. When both hemispheres of an EEG site are
//! available, the one whose averaged log-Hjorth profile is closest (in
//! Mahalanobis distance) to a reference population is kept.

pub mod butterworth;
pub mod resample;

use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::{Channel, ChannelRole, PolySignalSet};

pub use butterworth::{FilterKind, FilterSpec, Sos};
pub use resample::resample;

pub const TARGET_FS: f64 = 100.0;
pub const FILTER_ORDER: usize = 5;
pub const HIGHPASS_HZ: f64 = 0.2;
pub const LOWPASS_HZ: f64 = 49.0;
pub const SELECTION_SEGMENT_S: f64 = 300.0;
pub const MIN_REFERENCE_RECORDINGS: usize = 4;
const COVARIANCE_RIDGE: f64 = 1e-6;

pub fn highpass_spec() -> FilterSpec {
    FilterSpec::highpass(FILTER_ORDER, HIGHPASS_HZ)
}

pub fn lowpass_spec() -> FilterSpec {
    FilterSpec::lowpass(FILTER_ORDER, LOWPASS_HZ)
}

/// Zero-phase high-pass at 0.2 Hz then zero-phase low-pass at 49 Hz.
pub fn bandlimit(x: &[f64], fs: f64) -> Result<Vec<f64>> {
    if fs < TARGET_FS {
        return Err(Error::InvalidFilter(format!("bandlimit needs fs >= 100 Hz, got {fs}")));
    }
    let hp = highpass_spec().apply(x, fs)?;
    lowpass_spec().apply(&hp, fs)
}

/// Resample to 100 Hz, then band-limit.
pub fn condition_channel(x: &[f64], fs: f64) -> Result<Vec<f64>> {
    let y = resample(x, fs, TARGET_FS)?;
    bandlimit(&y, TARGET_FS)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HjorthTriple {
    pub activity: f64,
    pub mobility: f64,
    pub complexity: f64,
}

impl HjorthTriple {
    fn ln(&self) -> Option<Vector3<f64>> {
        let v = [self.activity, self.mobility, self.complexity];
        if v.iter().all(|&x| x > 0.0 && x.is_finite()) {
            Some(Vector3::new(v[0].ln(), v[1].ln(), v[2].ln()))
        } else {
            None
        }
    }
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

fn diff(x: &[f64]) -> Vec<f64> {
    x.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Hjorth activity, mobility and complexity of a segment (population
/// variances, first differences).
pub fn hjorth(x: &[f64]) -> Result<HjorthTriple> {
    if x.len() < 3 {
        return Err(Error::DegenerateSegment);
    }
    let d1 = diff(x);
    let d2 = diff(&d1);
    let (v0, v1, v2) = (variance(x), variance(&d1), variance(&d2));
    if !(v0 > 0.0 && v1 > 0.0) {
        return Err(Error::DegenerateSegment);
    }
    let mobility = (v1 / v0).sqrt();
    let complexity = (v2 / v1).sqrt() / mobility;
    Ok(HjorthTriple {
        activity: v0,
        mobility,
        complexity,
    })
}

/// Average over full 5-minute segments of the elementwise natural log of the
/// Hjorth triple. Segments whose triple is not strictly positive are skipped;
/// `None` when no usable segment remains.
pub fn log_hjorth_profile(x: &[f64], fs: f64) -> Result<Option<[f64; 3]>> {
    let seg = (SELECTION_SEGMENT_S * fs).round() as usize;
    if x.len() < seg {
        return Err(Error::SignalTooShort { len: x.len(), min: seg });
    }
    let mut acc = Vector3::zeros();
    let mut used = 0usize;
    for chunk in x.chunks_exact(seg) {
        if let Some(v) = hjorth(chunk).ok().and_then(|h| h.ln()) {
            acc += v;
            used += 1;
        }
    }
    Ok((used > 0).then(|| {
        let m = acc / used as f64;
        [m[0], m[1], m[2]]
    }))
}

/// Population of averaged log-Hjorth profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDistribution {
    pub mean: [f64; 3],
    /// Row-major 3x3.
    pub covariance: [f64; 9],
}

impl ReferenceDistribution {
    pub fn new(mean: [f64; 3], covariance: [f64; 9]) -> Result<Self> {
        let r = ReferenceDistribution { mean, covariance };
        r.cholesky()?;
        Ok(r)
    }

    fn cov_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.covariance)
    }

    fn cholesky(&self) -> Result<Cholesky<f64, nalgebra::U3>> {
        Cholesky::new(self.cov_matrix()).ok_or(Error::SingularCovariance)
    }

    pub fn mahalanobis(&self, v: &[f64; 3]) -> Result<f64> {
        let d = Vector3::from_column_slice(v) - Vector3::from_column_slice(&self.mean);
        let chol = self.cholesky()?;
        let z = chol.solve(&d);
        Ok(d.dot(&z).max(0.0).sqrt())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: ReferenceDistribution = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        ReferenceDistribution::new(r.mean, r.covariance)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Mahalanobis distance of a channel to the reference; infinite for channels
/// without any usable segment (flat lines, disconnects).
pub fn channel_distance(x: &[f64], fs: f64, reference: &ReferenceDistribution) -> Result<f64> {
    match log_hjorth_profile(x, fs)? {
        Some(v) => reference.mahalanobis(&v),
        None => Ok(f64::INFINITY),
    }
}

/// Picks the candidate closest to the reference population. Ties go to the
/// earlier candidate.
pub fn select_eeg_channel(
    candidates: &[(ChannelRole, &[f64])],
    fs: f64,
    reference: &ReferenceDistribution,
) -> Result<ChannelRole> {
    Ok(rank_candidates(candidates, fs, reference)?.selected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSelection {
    pub selected: ChannelRole,
    /// `None` for infinite distance (degenerate channel) or when no ranking
    /// was needed.
    pub distances: Vec<(ChannelRole, Option<f64>)>,
}

fn rank_candidates(
    candidates: &[(ChannelRole, &[f64])],
    fs: f64,
    reference: &ReferenceDistribution,
) -> Result<SiteSelection> {
    let first = candidates
        .first()
        .ok_or_else(|| Error::InvalidConfig("no EEG candidates".into()))?;
    if candidates.len() == 1 {
        return Ok(SiteSelection {
            selected: first.0,
            distances: vec![(first.0, None)],
        });
    }
    let mut best: Option<(ChannelRole, f64)> = None;
    let mut distances = Vec::with_capacity(candidates.len());
    for &(role, x) in candidates {
        let d = channel_distance(x, fs, reference)?;
        distances.push((role, d.is_finite().then_some(d)));
        if d.is_finite() && best.is_none_or(|(_, bd)| d < bd) {
            best = Some((role, d));
        }
    }
    let (selected, _) = best.ok_or(Error::AllDegenerate)?;
    Ok(SiteSelection { selected, distances })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EegSite {
    Central,
    Occipital,
}

impl EegSite {
    pub fn roles(self) -> [ChannelRole; 2] {
        match self {
            EegSite::Central => [ChannelRole::EegCLeft, ChannelRole::EegCRight],
            EegSite::Occipital => [ChannelRole::EegOLeft, ChannelRole::EegORight],
        }
    }
}

/// Fits the reference population from the central EEG channels of a training
/// set. Each recording contributes the mean profile over its usable central
/// channels, computed on conditioned (100 Hz, band-limited) signals.
pub fn fit_reference(training: &[PolySignalSet]) -> Result<ReferenceDistribution> {
    fit_reference_for_site(training, EegSite::Central)
}

pub fn fit_reference_for_site(training: &[PolySignalSet], site: EegSite) -> Result<ReferenceDistribution> {
    if training.len() < MIN_REFERENCE_RECORDINGS {
        return Err(Error::TooFewRecordings {
            found: training.len(),
            min: MIN_REFERENCE_RECORDINGS,
        });
    }
    let mut profiles = Vec::with_capacity(training.len());
    for psg in training {
        let mut acc = Vector3::zeros();
        let mut used = 0;
        for role in site.roles() {
            let Some(ch) = psg.channels.get(&role) else { continue };
            let x = condition_channel(&ch.to_f64(), ch.fs)?;
            if let Some(p) = log_hjorth_profile(&x, TARGET_FS)? {
                acc += Vector3::from_column_slice(&p);
                used += 1;
            }
        }
        if used > 0 {
            profiles.push(acc / used as f64);
        }
    }
    if profiles.len() < MIN_REFERENCE_RECORDINGS {
        return Err(Error::TooFewRecordings {
            found: profiles.len(),
            min: MIN_REFERENCE_RECORDINGS,
        });
    }
    reference_from_profiles(&profiles.iter().map(|v| [v[0], v[1], v[2]]).collect::<Vec<_>>())
}

/// Sample mean and covariance of profile vectors, with a ridge of
/// `1e-6 * trace / 3` (or `1e-6` when the trace vanishes) on the diagonal.
pub fn reference_from_profiles(profiles: &[[f64; 3]]) -> Result<ReferenceDistribution> {
    if profiles.len() < 2 {
        return Err(Error::TooFewRecordings {
            found: profiles.len(),
            min: 2,
        });
    }
    let n = profiles.len() as f64;
    let vs: Vec<Vector3<f64>> = profiles.iter().map(|p| Vector3::from_column_slice(p)).collect();
    let mean = vs.iter().fold(Vector3::zeros(), |a, v| a + v) / n;
    let mut cov = Matrix3::zeros();
    for v in &vs {
        let d = v - mean;
        cov += d * d.transpose();
    }
    cov /= n - 1.0;
    let trace = cov.trace();
    let ridge = if trace > 0.0 {
        COVARIANCE_RIDGE * trace / 3.0
    } else {
        COVARIANCE_RIDGE
    };
    cov += Matrix3::identity() * ridge;
    let mut covariance = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            covariance[3 * r + c] = cov[(r, c)];
        }
    }
    ReferenceDistribution::new([mean[0], mean[1], mean[2]], covariance)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub recording_id: String,
    pub central: SiteSelection,
    pub occipital: Option<SiteSelection>,
}

/// Conditions a full recording: selects one EEG per site, keeps both EOGs and
/// the chin EMG, and returns everything at 100 Hz band-limited.
pub fn preprocess_recording(
    psg: &PolySignalSet,
    reference: Option<&ReferenceDistribution>,
) -> Result<(PolySignalSet, SelectionReport)> {
    psg.require_full_montage()?;
    let mut conditioned = std::collections::BTreeMap::new();
    for (&role, ch) in &psg.channels {
        let x = condition_channel(&ch.to_f64(), ch.fs)?;
        conditioned.insert(role, x);
    }

    let pick = |site: EegSite| -> Result<Option<SiteSelection>> {
        let cands: Vec<(ChannelRole, &[f64])> = site
            .roles()
            .into_iter()
            .filter_map(|r| conditioned.get(&r).map(|x| (r, x.as_slice())))
            .collect();
        match (cands.len(), reference) {
            (0, _) => Ok(None),
            (1, _) => Ok(Some(SiteSelection {
                selected: cands[0].0,
                distances: vec![(cands[0].0, None)],
            })),
            (_, Some(r)) => rank_candidates(&cands, TARGET_FS, r).map(Some),
            (_, None) => Err(Error::MissingReference),
        }
    };
    let central = pick(EegSite::Central)?.ok_or(Error::MissingChannel(ChannelRole::EegCLeft))?;
    let occipital = pick(EegSite::Occipital)?;

    let mut keep = vec![central.selected, ChannelRole::EogL, ChannelRole::EogR, ChannelRole::EmgChin];
    if let Some(o) = &occipital {
        keep.push(o.selected);
    }
    let channels = keep
        .into_iter()
        .map(|role| {
            let x = &conditioned[&role];
            (role, Channel::new(x.iter().map(|&v| v as f32).collect(), TARGET_FS))
        })
        .collect();
    let out = PolySignalSet {
        recording_id: psg.recording_id.clone(),
        duration_s: psg.duration_s,
        channels,
    };
    out.validate()?;
    Ok((
        out,
        SelectionReport {
            recording_id: psg.recording_id.clone(),
            central,
            occipital,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(f: f64, a: f64, fs: f64, secs: f64) -> Vec<f64> {
        let n = (fs * secs).round() as usize;
        (0..n).map(|i| a * (2.0 * PI * f * i as f64 / fs).sin()).collect()
    }

    #[test]
    fn hjorth_of_a_sine() {
        let x = sine(5.0, 2.0, 100.0, 30.0);
        let h = hjorth(&x).unwrap();
        assert!((h.activity - 2.0).abs() < 1e-9, "{}", h.activity);
        // Differencing a sampled sine scales it by 2 sin(pi f / fs).
        let expect = 2.0 * (PI * 5.0 / 100.0).sin();
        // n-1 differences cover a non-integer number of periods, hence 1e-4.
        assert!((h.mobility - expect).abs() < 1e-4, "{} vs {expect}", h.mobility);
        assert!((expect - 0.3129).abs() < 1e-4);
    }

    #[test]
    fn white_noise_complexity_exceeds_one() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        for seed in 0..10 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..5000).map(|_| StandardNormal.sample(&mut rng)).collect();
            let h = hjorth(&x).unwrap();
            // White noise: var(dx) = 2, var(ddx) = 6, so complexity = sqrt(3/2).
            assert!(h.complexity > 1.0, "seed {seed}: {}", h.complexity);
            assert!((h.complexity - 1.5f64.sqrt()).abs() < 0.05);
        }
    }

    #[test]
    fn hjorth_rejects_constant() {
        assert!(matches!(hjorth(&[4.0; 100]), Err(Error::DegenerateSegment)));
        assert!(matches!(hjorth(&[1.0, 2.0]), Err(Error::DegenerateSegment)));
    }

    #[test]
    fn mahalanobis_of_mean_is_zero() {
        let r = ReferenceDistribution::new([1.0, -2.0, 0.5], [2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 0.5]).unwrap();
        assert_eq!(r.mahalanobis(&[1.0, -2.0, 0.5]).unwrap(), 0.0);
        let d = r.mahalanobis(&[1.0 + 2f64.sqrt(), -2.0, 0.5]).unwrap();
        assert!(d > 0.0);
    }

    #[test]
    fn non_pd_reference_rejected() {
        assert!(matches!(
            ReferenceDistribution::new([0.0; 3], [1.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            Err(Error::SingularCovariance)
        ));
    }

    #[test]
    fn identical_profiles_leave_only_the_ridge() {
        let r = reference_from_profiles(&[[1.0, 2.0, 3.0]; 6]).unwrap();
        assert_eq!(r.mean, [1.0, 2.0, 3.0]);
        let expect = [1e-6, 0.0, 0.0, 0.0, 1e-6, 0.0, 0.0, 0.0, 1e-6];
        assert_eq!(r.covariance, expect);
    }

    #[test]
    fn two_clusters_mean_between() {
        let mut p = vec![[0.0, 0.0, 0.0]; 5];
        p.extend(vec![[2.0, 4.0, -2.0]; 5]);
        let r = reference_from_profiles(&p).unwrap();
        assert_eq!(r.mean, [1.0, 2.0, -1.0]);
    }

    #[test]
    fn too_few_recordings() {
        assert!(matches!(fit_reference(&[]), Err(Error::TooFewRecordings { .. })));
    }

    #[test]
    fn single_candidate_wins_by_default() {
        let r = ReferenceDistribution::new([0.0; 3], [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let x = vec![0.0; 10];
        let pick = select_eeg_channel(&[(ChannelRole::EegCRight, &x)], 100.0, &r).unwrap();
        assert_eq!(pick, ChannelRole::EegCRight);
    }

    #[test]
    fn all_flat_candidates() {
        let r = ReferenceDistribution::new([0.0; 3], [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let x = vec![0.0; 30000];
        let err = select_eeg_channel(&[(ChannelRole::EegCLeft, &x), (ChannelRole::EegCRight, &x)], 100.0, &r);
        assert!(matches!(err, Err(Error::AllDegenerate)));
    }

    #[test]
    fn bandlimit_needs_100_hz() {
        assert!(bandlimit(&[0.0; 1000], 50.0).is_err());
    }
}
