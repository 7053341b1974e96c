//! Hypnodensity matrices and agreement statistics.
//!
//! A hypnodensity holds one probability distribution over (W, N1, N2, N3,
//! REM) per segment. It collapses to a hypnogram by summing the
//! distributions inside each epoch and taking the most likely stage; ties
//! always go to the earliest stage in that order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::{HypnogramLabels, Stage, ALLOWED_EPOCH_S};

pub const N_STAGES: usize = 5;
const ROW_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypnodensity {
    pub recording_id: String,
    pub resolution_s: u32,
    pub probs: Vec<[f64; N_STAGES]>,
}

impl Hypnodensity {
    /// Validates that every row is a distribution (sum 1 within 1e-6,
    /// entries in [0, 1]).
    pub fn new(recording_id: impl Into<String>, resolution_s: u32, probs: Vec<[f64; N_STAGES]>) -> Result<Self> {
        if !ALLOWED_EPOCH_S.contains(&resolution_s) {
            return Err(Error::InvalidHypnodensity(format!(
                "resolution {resolution_s} s not in {ALLOWED_EPOCH_S:?}"
            )));
        }
        for (i, row) in probs.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::InvalidHypnodensity(format!("row {i} is not a distribution: {row:?}")));
            }
        }
        Ok(Hypnodensity {
            recording_id: recording_id.into(),
            resolution_s,
            probs,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 * f64::from(self.resolution_s)
    }
}

/// Most likely stage; ties go to the earliest stage.
pub fn argmax_stage(scores: &[f64; N_STAGES]) -> Stage {
    let mut best = 0;
    for k in 1..N_STAGES {
        if scores[k] > scores[best] {
            best = k;
        }
    }
    Stage::from_index(best)
}

fn check_multiple(resolution_s: u32, target_s: u32) -> Result<usize> {
    if target_s == 0 || !target_s.is_multiple_of(resolution_s) {
        return Err(Error::IncompatibleResolution { resolution_s, target_s });
    }
    Ok((target_s / resolution_s) as usize)
}

/// Labels each `epoch_s` epoch with the stage of largest summed probability
/// over its segments. A trailing partial epoch is dropped.
pub fn to_hypnogram(hd: &Hypnodensity, epoch_s: u32) -> Result<HypnogramLabels> {
    let per = check_multiple(hd.resolution_s, epoch_s)?;
    let stages = hd
        .probs
        .chunks_exact(per)
        .map(|block| {
            let mut sum = [0.0; N_STAGES];
            for row in block {
                for (s, p) in sum.iter_mut().zip(row) {
                    *s += p;
                }
            }
            argmax_stage(&sum)
        })
        .collect();
    HypnogramLabels::new(stages, epoch_s)
}

/// Block means at a coarser resolution, renormalized per row. A trailing
/// partial block is dropped.
pub fn aggregate_resolution(hd: &Hypnodensity, target_s: u32) -> Result<Hypnodensity> {
    let per = check_multiple(hd.resolution_s, target_s)?;
    let probs = hd
        .probs
        .chunks_exact(per)
        .map(|block| {
            let mut mean = [0.0; N_STAGES];
            for row in block {
                for (m, p) in mean.iter_mut().zip(row) {
                    *m += p / per as f64;
                }
            }
            let total: f64 = mean.iter().sum();
            mean.map(|m| m / total)
        })
        .collect();
    Hypnodensity::new(hd.recording_id.clone(), target_s, probs)
}

/// Cohen's kappa over epochs both raters scored. When chance agreement is
/// 1 (both raters use one and the same stage), kappa is 1 if they agree
/// everywhere and 0 otherwise.
pub fn cohen_kappa(a: &[Stage], b: &[Stage]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthDisagreement(a.len(), b.len()));
    }
    let mut counts_a = [0usize; N_STAGES];
    let mut counts_b = [0usize; N_STAGES];
    let (mut agree, mut n) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        let (Some(i), Some(j)) = (x.index(), y.index()) else {
            continue;
        };
        counts_a[i] += 1;
        counts_b[j] += 1;
        agree += usize::from(i == j);
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoScoredEpochs);
    }
    let nf = n as f64;
    let p_o = agree as f64 / nf;
    let p_e: f64 = counts_a.iter().zip(&counts_b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>() / (nf * nf);
    if p_e >= 1.0 {
        return Ok(if p_o == 1.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - (1.0 - p_o) / (1.0 - p_e))
}

/// Aligned hypnograms from several scorers of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerSet {
    pub scorers: Vec<HypnogramLabels>,
}

impl ScorerSet {
    pub fn new(scorers: Vec<HypnogramLabels>) -> Result<Self> {
        let first = scorers.first().ok_or(Error::TooFewScorers { found: 0, min: 1 })?;
        for s in &scorers[1..] {
            if s.len() != first.len() {
                return Err(Error::LengthDisagreement(first.len(), s.len()));
            }
            if s.epoch_s != first.epoch_s {
                return Err(Error::InvalidEpoch(s.epoch_s));
            }
        }
        Ok(ScorerSet { scorers })
    }

    pub fn len(&self) -> usize {
        self.scorers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scorers.is_empty()
    }

    pub fn n_epochs(&self) -> usize {
        self.scorers[0].len()
    }

    pub fn epoch_s(&self) -> u32 {
        self.scorers[0].epoch_s
    }

    /// Fraction of scorers voting for each stage at `epoch`, over scorers
    /// that scored it; `None` when nobody did.
    pub fn vote_distribution(&self, epoch: usize) -> Option<[f64; N_STAGES]> {
        let mut counts = [0.0; N_STAGES];
        let mut n = 0.0;
        for s in &self.scorers {
            if let Some(i) = s.stages[epoch].index() {
                counts[i] += 1.0;
                n += 1.0;
            }
        }
        (n > 0.0).then(|| counts.map(|c| c / n))
    }
}

/// Weighted vote per epoch; epochs nobody scored stay unscored.
pub fn weighted_vote(labels: &[&HypnogramLabels], weights: &[f64]) -> Vec<Stage> {
    let n = labels[0].len();
    (0..n)
        .map(|e| {
            let mut score = [0.0; N_STAGES];
            let mut any = false;
            for (l, w) in labels.iter().zip(weights) {
                if let Some(i) = l.stages[e].index() {
                    score[i] += w;
                    any = true;
                }
            }
            if any {
                argmax_stage(&score)
            } else {
                Stage::Unscored
            }
        })
        .collect()
}

/// Unweighted majority vote with stage-order tie-breaking.
pub fn majority_vote(labels: &[&HypnogramLabels]) -> Vec<Stage> {
    weighted_vote(labels, &vec![1.0; labels.len()])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Consensus {
    pub hypnogram: HypnogramLabels,
    /// Leave-one-out kappa of each scorer, clamped at 0.
    pub kappas: Vec<f64>,
}

/// Kappa-weighted consensus. Each scorer's weight is its kappa against the
/// majority vote of the other scorers (negative kappas count as 0). If every
/// weight is 0 the result is the plain majority vote.
pub fn consensus_hypnogram(set: &ScorerSet) -> Result<Consensus> {
    if set.len() < 2 {
        return Err(Error::TooFewScorers { found: set.len(), min: 2 });
    }
    let all: Vec<&HypnogramLabels> = set.scorers.iter().collect();
    let kappas: Vec<f64> = (0..set.len())
        .map(|i| {
            let others: Vec<&HypnogramLabels> = all.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, s)| *s).collect();
            let reference = majority_vote(&others);
            match cohen_kappa(&set.scorers[i].stages, &reference) {
                Ok(k) => Ok(k.max(0.0)),
                Err(Error::NoScoredEpochs) => Ok(0.0),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let stages = if kappas.iter().all(|&k| k == 0.0) {
        majority_vote(&all)
    } else {
        weighted_vote(&all, &kappas)
    };
    Ok(Consensus {
        hypnogram: HypnogramLabels::new(stages, set.epoch_s())?,
        kappas,
    })
}

/// Margin between the largest and second-largest vote fractions.
pub fn epoch_weight(distribution: &[f64; N_STAGES]) -> f64 {
    let mut sorted = *distribution;
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[0] - sorted[1]
}

/// Accuracy against the scorers' per-epoch plurality, each epoch weighted by
/// its vote margin. Epochs the model or every scorer left unscored are
/// skipped.
pub fn weighted_accuracy(model: &HypnogramLabels, set: &ScorerSet) -> Result<f64> {
    if model.len() != set.n_epochs() {
        return Err(Error::LengthDisagreement(model.len(), set.n_epochs()));
    }
    let (mut hit, mut total) = (0.0, 0.0);
    for (e, stage) in model.stages.iter().enumerate() {
        let (Some(_), Some(dist)) = (stage.index(), set.vote_distribution(e)) else {
            continue;
        };
        let w = epoch_weight(&dist);
        total += w;
        if argmax_stage(&dist) == *stage {
            hit += w;
        }
    }
    if total == 0.0 {
        return Err(Error::ZeroTotalWeight);
    }
    Ok(hit / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    /// Rows: model stage; columns: reference stage.
    pub counts: [[usize; N_STAGES]; N_STAGES],
    /// `counts` as fractions of all jointly scored epochs.
    pub fractions: [[f64; N_STAGES]; N_STAGES],
    pub accuracy: f64,
    pub kappa: f64,
}

pub fn confusion(model: &HypnogramLabels, reference: &HypnogramLabels) -> Result<Confusion> {
    if model.len() != reference.len() {
        return Err(Error::LengthDisagreement(model.len(), reference.len()));
    }
    let mut counts = [[0usize; N_STAGES]; N_STAGES];
    for (m, r) in model.stages.iter().zip(&reference.stages) {
        if let (Some(i), Some(j)) = (m.index(), r.index()) {
            counts[i][j] += 1;
        }
    }
    let total: usize = counts.iter().flatten().sum();
    if total == 0 {
        return Err(Error::NoScoredEpochs);
    }
    let fractions = counts.map(|row| row.map(|c| c as f64 / total as f64));
    let accuracy = (0..N_STAGES).map(|k| counts[k][k]).sum::<usize>() as f64 / total as f64;
    let kappa = cohen_kappa(&model.stages, &reference.stages)?;
    Ok(Confusion {
        counts,
        fractions,
        accuracy,
        kappa,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleHypnodensity {
    pub mean: Hypnodensity,
    /// Population variance across models, per segment and stage.
    pub variance: Vec<[f64; N_STAGES]>,
    pub n_models: usize,
}

pub fn ensemble_hypnodensity(models: &[Hypnodensity]) -> Result<EnsembleHypnodensity> {
    let first = models
        .first()
        .ok_or_else(|| Error::ShapeMismatch("ensemble needs at least one model".into()))?;
    for m in models {
        if m.len() != first.len() || m.resolution_s != first.resolution_s {
            return Err(Error::ShapeMismatch(format!(
                "hypnodensity {} x {} s vs {} x {} s",
                m.len(),
                m.resolution_s,
                first.len(),
                first.resolution_s
            )));
        }
    }
    let n = models.len() as f64;
    let mut mean = vec![[0.0; N_STAGES]; first.len()];
    let mut variance = vec![[0.0; N_STAGES]; first.len()];
    for (t, (mu, var)) in mean.iter_mut().zip(&mut variance).enumerate() {
        for k in 0..N_STAGES {
            // shifted by the first model so identical members give exactly zero
            let anchor = first.probs[t][k];
            let m = anchor + models.iter().map(|h| h.probs[t][k] - anchor).sum::<f64>() / n;
            mu[k] = m;
            var[k] = models.iter().map(|h| (h.probs[t][k] - m).powi(2)).sum::<f64>() / n;
        }
    }
    Ok(EnsembleHypnodensity {
        mean: Hypnodensity::new(first.recording_id.clone(), first.resolution_s, mean)?,
        variance,
        n_models: models.len(),
    })
}

/// Variances divided by the mean W-column variance over segments where the
/// ensemble correctly predicted wake (segment label = label of the epoch
/// containing it).
pub fn relative_variance(ens: &EnsembleHypnodensity, labels: &HypnogramLabels) -> Result<Vec<[f64; N_STAGES]>> {
    let res = ens.mean.resolution_s as usize;
    let epoch = labels.epoch_s as usize;
    let mut acc = (0.0, 0usize);
    for (t, row) in ens.mean.probs.iter().enumerate() {
        let truth = labels.stages.get(t * res / epoch).copied();
        if truth == Some(Stage::W) && argmax_stage(row) == Stage::W {
            acc.0 += ens.variance[t][0];
            acc.1 += 1;
        }
    }
    if acc.1 == 0 || acc.0 == 0.0 {
        return Err(Error::InvalidHypnodensity(
            "no correctly predicted wake segment with nonzero variance".into(),
        ));
    }
    let reference = acc.0 / acc.1 as f64;
    Ok(ens.variance.iter().map(|row| row.map(|v| v / reference)).collect())
}

pub const CSV_HEADER: &str = "t_start_s,W,N1,N2,N3,REM";
const VAR_HEADER: &str = "varW,varN1,varN2,varN3,varREM";

fn push_row(out: &mut String, t: u64, values: impl Iterator<Item = f64>) {
    out.push_str(&t.to_string());
    for v in values {
        out.push(',');
        out.push_str(&v.to_string());
    }
    out.push('\n');
}

pub fn to_csv(hd: &Hypnodensity) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for (i, row) in hd.probs.iter().enumerate() {
        push_row(&mut out, i as u64 * u64::from(hd.resolution_s), row.iter().copied());
    }
    out
}

pub fn ensemble_to_csv(ens: &EnsembleHypnodensity) -> String {
    let mut out = format!("{CSV_HEADER},{VAR_HEADER}\n");
    for (i, (row, var)) in ens.mean.probs.iter().zip(&ens.variance).enumerate() {
        push_row(
            &mut out,
            i as u64 * u64::from(ens.mean.resolution_s),
            row.iter().chain(var.iter()).copied(),
        );
    }
    out
}

/// Parses a hypnodensity CSV (with or without variance columns). The
/// resolution is the spacing of the first two rows; a single row is taken
/// as one 30 s epoch.
pub fn parse_csv(text: &str, recording_id: &str) -> Result<Hypnodensity> {
    let bad = |m: String| Error::InvalidHypnodensity(m);
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| bad("empty csv".into()))?.trim();
    let with_var = format!("{CSV_HEADER},{VAR_HEADER}");
    if header != CSV_HEADER && header != with_var {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut starts = Vec::new();
    let mut probs = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != header.split(',').count() {
            return Err(bad(format!("row {} has {} fields", n + 1, fields.len())));
        }
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("row {}: {s:?}: {e}", n + 1)));
        starts.push(parse(fields[0])?);
        let mut row = [0.0; N_STAGES];
        for (k, r) in row.iter_mut().enumerate() {
            *r = parse(fields[k + 1])?;
        }
        probs.push(row);
    }
    let resolution = match starts.as_slice() {
        [] => return Err(bad("no rows".into())),
        [_] => 30.0,
        [a, b, ..] => b - a,
    };
    if resolution.fract() != 0.0 || resolution <= 0.0 {
        return Err(bad(format!("row spacing {resolution} s is not a whole number of seconds")));
    }
    let res = resolution as u32;
    for (i, s) in starts.iter().enumerate() {
        if *s != i as f64 * resolution {
            return Err(bad(format!("row {} starts at {s} s, expected {}", i + 1, i as f64 * resolution)));
        }
    }
    Hypnodensity::new(recording_id, res, probs)
}

pub fn load_csv(path: &Path) -> Result<Hypnodensity> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().trim_end_matches(".hypnodensity").to_string())
        .unwrap_or_default();
    parse_csv(&text, &id)
}
