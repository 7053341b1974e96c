//! Narcolepsy classification from feature vectors: recursive feature
//! elimination, a Gaussian-process classifier with a probit link fitted by
//! the Laplace approximation, HLA gating and ROC statistics.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erfc};

use crate::error::{Error, Result};
use crate::signal_io::{read_f32le, write_f32le};

/// Features kept in at least this fraction of RFE folds are selected.
pub const RFE_CUTOFF: f64 = 0.40;
/// Features each RFE fold keeps.
pub const RFE_TARGET: usize = 38;
pub const RFE_FOLDS: usize = 10;
pub const RFE_MIN_SAMPLES: usize = 20;
/// L2 penalty of the ridge classifier that ranks features.
pub const RIDGE_LAMBDA: f64 = 1.0;
pub const GP_MIN_SAMPLES: usize = 10;
/// Ensemble score threshold without HLA information.
pub const NARCOLEPSY_THRESHOLD: f64 = -0.03;
/// Score threshold for HLA-positive subjects.
pub const HLA_THRESHOLD: f64 = -0.53;

/// Length scales are these multiples of the median pairwise distance.
pub const LENGTH_SCALE_FACTORS: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];
pub const SIGNAL_SD_GRID: [f64; 3] = [0.5, 1.0, 2.0];
pub const NOISE_SD_GRID: [f64; 3] = [1e-4, 1e-2, 1e-1];
pub const MEAN_GRID: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_TOL: f64 = 1e-10;
const MAX_JITTER: f64 = 1e-2;
const CONSTANT_COLUMN_SD: f64 = 1e-12;
/// 97.5% standard normal quantile.
const Z_95: f64 = 1.959_963_984_540_054;

fn check_rows(x: &[Vec<f64>]) -> Result<usize> {
    let d = x.first().map_or(0, Vec::len);
    for row in x {
        if row.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: row.len() });
        }
    }
    Ok(d)
}

fn check_labels(x: &[Vec<f64>], y: &[bool], min: usize) -> Result<usize> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), found: y.len() });
    }
    if x.len() < min {
        return Err(Error::TooFewSamples { found: x.len(), min });
    }
    if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
        return Err(Error::SingleClass);
    }
    check_rows(x)
}

/// Z-scoring over a subset of columns, using training-set statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub width: usize,
    pub columns: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits on `columns` of `rows`; constant columns are dropped.
    pub fn fit(rows: &[Vec<f64>], columns: &[usize]) -> Result<Self> {
        let width = check_rows(rows)?;
        if rows.is_empty() {
            return Err(Error::TooFewSamples { found: 0, min: 1 });
        }
        let n = rows.len() as f64;
        let mut out = Standardizer { width, columns: Vec::new(), mean: Vec::new(), std: Vec::new() };
        for &c in columns {
            if c >= width {
                return Err(Error::DimensionMismatch { expected: width, found: c + 1 });
            }
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
            let sd = (rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n).sqrt();
            if sd <= CONSTANT_COLUMN_SD * mean.abs().max(1.0) {
                warn!("dropping constant feature column {c}");
                continue;
            }
            out.columns.push(c);
            out.mean.push(mean);
            out.std.push(sd);
        }
        Ok(out)
    }

    pub fn transform(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.width {
            return Err(Error::DimensionMismatch { expected: self.width, found: row.len() });
        }
        Ok(self.columns.iter().zip(self.mean.iter().zip(&self.std)).map(|(&c, (m, s))| (row[c] - m) / s).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfeConfig {
    pub folds: usize,
    pub target: usize,
    pub cutoff: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for RfeConfig {
    fn default() -> Self {
        RfeConfig { folds: RFE_FOLDS, target: RFE_TARGET, cutoff: RFE_CUTOFF, lambda: RIDGE_LAMBDA, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Fraction of folds retaining each feature.
    pub frequency: Vec<f64>,
    pub selected: Vec<usize>,
    pub target: usize,
}

/// Ridge weights over the active columns of `z` (rows standardized) for
/// centred targets. Uses the dual form when there are fewer rows than
/// columns.
fn ridge_weights(z: &DMatrix<f64>, yc: &DVector<f64>, active: &[usize], lambda: f64, gram: &Gram) -> Result<Vec<f64>> {
    let sub = z.select_columns(active);
    match gram {
        Gram::Dual(g) => {
            let mut a = g.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda;
            }
            let chol = Cholesky::new(a).ok_or(Error::CholeskyFailure(lambda))?;
            let alpha = chol.solve(yc);
            Ok((sub.transpose() * alpha).iter().copied().collect())
        }
        Gram::Primal(full) => {
            let mut a = DMatrix::from_fn(active.len(), active.len(), |i, j| full[(active[i], active[j])]);
            for i in 0..a.nrows() {
                a[(i, i)] += lambda;
            }
            let chol = Cholesky::new(a).ok_or(Error::CholeskyFailure(lambda))?;
            Ok(chol.solve(&(sub.transpose() * yc)).iter().copied().collect())
        }
    }
}

enum Gram {
    /// Row Gram matrix over the active columns.
    Dual(DMatrix<f64>),
    /// Column Gram matrix over all columns.
    Primal(DMatrix<f64>),
}

/// Eliminates one column at a time until `target` remain; returns the
/// survivors.
fn eliminate(rows: &[&Vec<f64>], y: &[bool], cfg: &RfeConfig) -> Result<Vec<usize>> {
    let width = rows[0].len();
    let owned: Vec<Vec<f64>> = rows.iter().map(|r| (*r).clone()).collect();
    let all: Vec<usize> = (0..width).collect();
    let std = Standardizer::fit(&owned, &all)?;
    let mut active: Vec<usize> = (0..std.columns.len()).collect();
    if active.len() <= cfg.target {
        return Ok(std.columns.clone());
    }
    let z = DMatrix::from_fn(rows.len(), std.columns.len(), |i, j| {
        let c = std.columns[j];
        (rows[i][c] - std.mean[j]) / std.std[j]
    });
    let ybar = y.iter().map(|&v| if v { 1.0 } else { -1.0 }).sum::<f64>() / y.len() as f64;
    let yc = DVector::from_iterator(y.len(), y.iter().map(|&v| if v { 1.0 } else { -1.0 } - ybar));
    let mut gram = if rows.len() <= active.len() {
        Gram::Dual(&z * z.transpose())
    } else {
        Gram::Primal(z.transpose() * &z)
    };
    while active.len() > cfg.target {
        let w = ridge_weights(&z, &yc, &active, cfg.lambda, &gram)?;
        let mut worst = 0;
        for (k, v) in w.iter().enumerate() {
            if v.abs() < w[worst].abs() {
                worst = k;
            }
        }
        let removed = active.remove(worst);
        if let Gram::Dual(g) = &mut gram {
            let col = z.column(removed);
            *g -= col * col.transpose();
        }
    }
    Ok(active.into_iter().map(|j| std.columns[j]).collect())
}

/// Cross-validated recursive feature elimination. Each fold trains on the
/// remaining folds and eliminates down to `cfg.target` features.
pub fn rfe(x: &[Vec<f64>], y: &[bool], cfg: &RfeConfig) -> Result<SelectionResult> {
    let width = check_labels(x, y, RFE_MIN_SAMPLES)?;
    if cfg.folds < 2 || cfg.folds > x.len() {
        return Err(Error::InvalidConfig(format!("rfe folds must be in 2..={}, got {}", x.len(), cfg.folds)));
    }
    if cfg.target == 0 {
        return Err(Error::InvalidConfig("rfe target must be positive".into()));
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut fold_of = vec![0; x.len()];
    for (k, &i) in order.iter().enumerate() {
        fold_of[i] = k % cfg.folds;
    }
    let mut counts = vec![0usize; width];
    for fold in 0..cfg.folds {
        let train: Vec<usize> = (0..x.len()).filter(|&i| fold_of[i] != fold).collect();
        let rows: Vec<&Vec<f64>> = train.iter().map(|&i| &x[i]).collect();
        let labels: Vec<bool> = train.iter().map(|&i| y[i]).collect();
        for c in eliminate(&rows, &labels, cfg)? {
            counts[c] += 1;
        }
    }
    let frequency: Vec<f64> = counts.iter().map(|&c| c as f64 / cfg.folds as f64).collect();
    let selected = (0..width).filter(|&j| frequency[j] >= cfg.cutoff).collect();
    Ok(SelectionResult { frequency, selected, target: cfg.target })
}

/// Standard normal density over distribution ratio `phi(z) / Phi(z)`.
fn inverse_mills(z: f64) -> f64 {
    if z > -30.0 {
        let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        pdf / (0.5 * erfc(-z / std::f64::consts::SQRT_2))
    } else {
        let z2 = z * z;
        -z / (1.0 - 1.0 / z2 + 3.0 / (z2 * z2))
    }
}

fn log_normal_cdf(z: f64) -> f64 {
    if z > -30.0 {
        (0.5 * erfc(-z / std::f64::consts::SQRT_2)).ln()
    } else {
        -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln() - inverse_mills(z).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub signal_sd: f64,
    pub length_scale: f64,
    pub noise_sd: f64,
    pub mean: f64,
}

impl GpHyper {
    fn kernel(&self, sq_dist: f64) -> f64 {
        self.signal_sd * self.signal_sd * (-sq_dist / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

#[derive(Debug, Clone)]
struct Posterior {
    grad: DVector<f64>,
    sqrt_w: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_marginal: f64,
}

/// Binary GP classifier; labels are +1 (true) and -1 (false).
#[derive(Debug, Clone)]
pub struct GpModel {
    pub hyper: GpHyper,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<bool>,
    posterior: Posterior,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn sq_dist_matrix(x: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(x.len(), x.len(), |i, j| sq_dist(&x[i], &x[j]))
}

fn cholesky_with_jitter(b: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let mut jitter = 0.0;
    loop {
        let mut m = b.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            return Ok(c);
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        if jitter > MAX_JITTER {
            return Err(Error::CholeskyFailure(jitter / 10.0));
        }
    }
}

/// Newton iterations for the posterior mode of the latent offsets from the
/// constant mean.
fn laplace(d2: &DMatrix<f64>, y: &[bool], hyper: &GpHyper) -> Result<Posterior> {
    let n = y.len();
    let sign: Vec<f64> = y.iter().map(|&v| if v { 1.0 } else { -1.0 }).collect();
    let mut k = d2.map(|v| hyper.kernel(v));
    for i in 0..n {
        k[(i, i)] += hyper.noise_sd * hyper.noise_sd;
    }
    let terms = |g: &DVector<f64>| {
        let mut lp = 0.0;
        let mut grad = DVector::zeros(n);
        let mut w = DVector::zeros(n);
        for i in 0..n {
            let z = sign[i] * (g[i] + hyper.mean);
            let r = inverse_mills(z);
            lp += log_normal_cdf(z);
            grad[i] = sign[i] * r;
            w[i] = r * r + z * r;
        }
        (lp, grad, w)
    };
    let objective = |a: &DVector<f64>, g: &DVector<f64>| -0.5 * a.dot(g) + terms(g).0;

    let mut g = DVector::zeros(n);
    let mut a = DVector::zeros(n);
    let mut psi = objective(&a, &g);
    for _ in 0..NEWTON_MAX_ITER {
        let (_, grad, w) = terms(&g);
        let sw = w.map(f64::sqrt);
        let b = DMatrix::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) + sw[i] * k[(i, j)] * sw[j]);
        let chol = cholesky_with_jitter(b)?;
        let bvec = w.component_mul(&g) + &grad;
        let t = sw.component_mul(&(&k * &bvec));
        let a_new = &bvec - sw.component_mul(&chol.solve(&t));
        let mut step = 1.0;
        let (mut a_try, mut g_try, mut psi_try);
        loop {
            a_try = &a + (&a_new - &a) * step;
            g_try = &k * &a_try;
            psi_try = objective(&a_try, &g_try);
            if psi_try >= psi - 1e-12 * psi.abs() || step < 1e-6 {
                break;
            }
            step *= 0.5;
        }
        let done = (psi_try - psi).abs() <= NEWTON_TOL * psi.abs().max(1.0);
        a = a_try;
        g = g_try;
        psi = psi_try;
        if done {
            break;
        }
    }
    let (lp, grad, w) = terms(&g);
    let sqrt_w = w.map(f64::sqrt);
    let b = DMatrix::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) + sqrt_w[i] * k[(i, j)] * sqrt_w[j]);
    let chol = cholesky_with_jitter(b)?;
    let half_log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    let log_marginal = -0.5 * a.dot(&g) + lp - half_log_det;
    if !log_marginal.is_finite() {
        return Err(Error::CholeskyFailure(0.0));
    }
    Ok(Posterior { grad, sqrt_w, chol, log_marginal })
}

fn round_f32(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter().map(|r| r.iter().map(|&v| f64::from(v as f32)).collect()).collect()
}

fn median_distance(d2: &DMatrix<f64>) -> f64 {
    let n = d2.nrows();
    let mut d: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| d2[(i, j)].sqrt()).collect();
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 { m } else { 1.0 }
}

/// Fits hyperparameters by maximizing the Laplace marginal likelihood over
/// the fixed grid. Inputs are rounded to f32 so archives reproduce the model
/// exactly.
pub fn gp_fit(x: &[Vec<f64>], y: &[bool]) -> Result<GpModel> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), found: y.len() });
    }
    if x.len() < GP_MIN_SAMPLES {
        return Err(Error::TooFewSamples { found: x.len(), min: GP_MIN_SAMPLES });
    }
    if check_rows(x)? == 0 {
        return Err(Error::DimensionMismatch { expected: 1, found: 0 });
    }
    let x = round_f32(x);
    let d2 = sq_dist_matrix(&x);
    let base = median_distance(&d2);
    let mut best: Option<(GpHyper, Posterior)> = None;
    for factor in LENGTH_SCALE_FACTORS {
        for signal_sd in SIGNAL_SD_GRID {
            for noise_sd in NOISE_SD_GRID {
                for mean in MEAN_GRID {
                    let hyper = GpHyper { signal_sd, length_scale: factor * base, noise_sd, mean };
                    let post = laplace(&d2, y, &hyper)?;
                    if best.as_ref().is_none_or(|(_, b)| post.log_marginal > b.log_marginal) {
                        best = Some((hyper, post));
                    }
                }
            }
        }
    }
    let (hyper, posterior) = best.expect("grid is non-empty");
    Ok(GpModel { hyper, x, y: y.to_vec(), posterior })
}

impl GpModel {
    /// Rebuilds the posterior for fixed hyperparameters.
    pub fn with_hyper(x: Vec<Vec<f64>>, y: Vec<bool>, hyper: GpHyper) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), found: y.len() });
        }
        check_rows(&x)?;
        let x = round_f32(&x);
        let posterior = laplace(&sq_dist_matrix(&x), &y, &hyper)?;
        Ok(GpModel { hyper, x, y, posterior })
    }

    pub fn dim(&self) -> usize {
        self.x[0].len()
    }

    pub fn log_marginal(&self) -> f64 {
        self.posterior.log_marginal
    }

    /// Latent predictive mean and variance at `x`.
    pub fn latent(&self, x: &[f64]) -> Result<(f64, f64)> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: x.len() });
        }
        let p = &self.posterior;
        let ks = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| self.hyper.kernel(sq_dist(xi, x))));
        let mean = self.hyper.mean + ks.dot(&p.grad);
        let v = p.chol.l_dirty().solve_lower_triangular(&p.sqrt_w.component_mul(&ks)).expect("cholesky factor is nonsingular");
        let var = (self.hyper.signal_sd * self.hyper.signal_sd - v.dot(&v)).max(0.0);
        Ok((mean, var))
    }

    /// Score `E[y]` in [-1, 1] with the latent predictive variance.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let (mean, var) = self.latent(x)?;
        Ok((erf(mean / (2.0 * (1.0 + var)).sqrt()), var))
    }
}

/// Feature selection, standardization and a GP on the selected features.
#[derive(Debug, Clone)]
pub struct NarcolepsyClassifier {
    pub selection: SelectionResult,
    pub standardizer: Standardizer,
    pub gp: GpModel,
}

impl NarcolepsyClassifier {
    pub fn fit(x: &[Vec<f64>], y: &[bool], cfg: &RfeConfig) -> Result<Self> {
        let selection = rfe(x, y, cfg)?;
        let mut columns = selection.selected.clone();
        if columns.is_empty() {
            let top = selection.frequency.iter().copied().fold(0.0, f64::max);
            columns = (0..selection.frequency.len()).filter(|&j| selection.frequency[j] == top).collect();
            warn!("no feature reached the selection cutoff; using {} most frequent", columns.len());
        }
        let standardizer = Standardizer::fit(x, &columns)?;
        if standardizer.columns.is_empty() {
            return Err(Error::InvalidConfig("every selected feature is constant".into()));
        }
        let z = x.iter().map(|r| standardizer.transform(r)).collect::<Result<Vec<_>>>()?;
        let gp = gp_fit(&z, y)?;
        Ok(NarcolepsyClassifier { selection, standardizer, gp })
    }

    pub fn predict(&self, row: &[f64]) -> Result<(f64, f64)> {
        self.gp.predict(&self.standardizer.transform(row)?)
    }
}

pub const CLASSIFIER_SUFFIX: &str = ".gp.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierManifest {
    selection: SelectionResult,
    standardizer: Standardizer,
    hyper: GpHyper,
    labels: Vec<bool>,
    n_train: usize,
    dim: usize,
    inputs_file: String,
}

/// Writes `<name>.gp.json` and `<name>.gp.inputs.f32le`; returns the manifest
/// path. The posterior is recomputed on load.
pub fn save_classifier(dir: &Path, name: &str, clf: &NarcolepsyClassifier) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let inputs_file = format!("{name}.gp.inputs.f32le");
    let flat: Vec<f32> = clf.gp.x.iter().flatten().map(|&v| v as f32).collect();
    write_f32le(&dir.join(&inputs_file), &flat)?;
    let manifest = ClassifierManifest {
        selection: clf.selection.clone(),
        standardizer: clf.standardizer.clone(),
        hyper: clf.gp.hyper,
        labels: clf.gp.y.clone(),
        n_train: clf.gp.x.len(),
        dim: clf.gp.dim(),
        inputs_file,
    };
    let path = dir.join(format!("{name}{CLASSIFIER_SUFFIX}"));
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_classifier(path: &Path) -> Result<NarcolepsyClassifier> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: ClassifierManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let flat = read_f32le(&dir.join(&m.inputs_file))?;
    if flat.len() != m.n_train * m.dim || m.labels.len() != m.n_train || m.dim == 0 {
        return Err(Error::CorruptHeader(format!("{}: inputs do not match declared shape", path.display())));
    }
    let x = flat.chunks(m.dim).map(|c| c.iter().map(|&v| f64::from(v)).collect()).collect();
    let gp = GpModel::with_hyper(x, m.labels, m.hyper)?;
    Ok(NarcolepsyClassifier { selection: m.selection, standardizer: m.standardizer, gp })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub score: f64,
    pub variance: f64,
    pub label: bool,
    pub threshold: f64,
    pub hla_used: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub narcolepsy: f64,
    pub hla: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { narcolepsy: NARCOLEPSY_THRESHOLD, hla: HLA_THRESHOLD }
    }
}

/// Mean and population variance of per-model scores, labelled at the
/// no-HLA threshold.
pub fn ensemble_diagnose(scores: &[f64]) -> Result<DiagnosisReport> {
    ensemble_diagnose_with(scores, &Thresholds::default())
}

pub fn ensemble_diagnose_with(scores: &[f64], thresholds: &Thresholds) -> Result<DiagnosisReport> {
    if scores.is_empty() {
        return Err(Error::TooFewSamples { found: 0, min: 1 });
    }
    let n = scores.len() as f64;
    let score = scores.iter().sum::<f64>() / n;
    let variance = scores.iter().map(|s| (s - score).powi(2)).sum::<f64>() / n;
    Ok(DiagnosisReport {
        score,
        variance,
        label: score >= thresholds.narcolepsy,
        threshold: thresholds.narcolepsy,
        hla_used: false,
    })
}

/// HLA-negative subjects are always negative; HLA-positive subjects use the
/// lower threshold.
pub fn apply_hla(report: DiagnosisReport, hla_positive: bool) -> DiagnosisReport {
    apply_hla_with(report, hla_positive, &Thresholds::default())
}

pub fn apply_hla_with(report: DiagnosisReport, hla_positive: bool, thresholds: &Thresholds) -> DiagnosisReport {
    DiagnosisReport {
        label: hla_positive && report.score >= thresholds.hla,
        threshold: thresholds.hla,
        hla_used: true,
        ..report
    }
}

/// 95% Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = Z_95 * Z_95;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = Z_95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub sensitivity_ci: (f64, f64),
    pub specificity_ci: (f64, f64),
    pub true_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
    pub false_positive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n_positive: usize,
    pub n_negative: usize,
    pub auc: f64,
    pub roc: Vec<RocPoint>,
    pub operating: Vec<OperatingPoint>,
}

/// Sensitivity and specificity of `score >= threshold` at each threshold,
/// the full ROC sweep and the AUC (ties count one half).
pub fn evaluate(scores: &[f64], truth: &[bool], thresholds: &[f64]) -> Result<Evaluation> {
    if scores.len() != truth.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), found: scores.len() });
    }
    let pos: Vec<f64> = scores.iter().zip(truth).filter(|(_, &t)| t).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(truth).filter(|(_, &t)| !t).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass);
    }
    let point = |threshold: f64| {
        let tp = pos.iter().filter(|&&s| s >= threshold).count();
        let tn = neg.iter().filter(|&&s| s < threshold).count();
        OperatingPoint {
            threshold,
            sensitivity: tp as f64 / pos.len() as f64,
            specificity: tn as f64 / neg.len() as f64,
            sensitivity_ci: wilson_interval(tp, pos.len()),
            specificity_ci: wilson_interval(tn, neg.len()),
            true_positive: tp,
            false_negative: pos.len() - tp,
            true_negative: tn,
            false_positive: neg.len() - tn,
        }
    };
    let mut cuts: Vec<f64> = scores.to_vec();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let mut roc = vec![RocPoint { threshold: f64::INFINITY, sensitivity: 0.0, specificity: 1.0 }];
    roc.extend(cuts.into_iter().map(|t| {
        let p = point(t);
        RocPoint { threshold: t, sensitivity: p.sensitivity, specificity: p.specificity }
    }));
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            wins += if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 };
        }
    }
    Ok(Evaluation {
        n_positive: pos.len(),
        n_negative: neg.len(),
        auc: wins / (pos.len() * neg.len()) as f64,
        roc,
        operating: thresholds.iter().map(|&t| point(t)).collect(),
    })
}

pub fn roc_to_csv(eval: &Evaluation) -> String {
    let mut out = String::from("threshold,sensitivity,specificity\n");
    for p in &eval.roc {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.sensitivity, p.specificity));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(score: f64) -> DiagnosisReport {
        ensemble_diagnose(&[score]).unwrap()
    }

    #[test]
    fn thresholds() {
        assert!(ensemble_diagnose(&[1.0, 1.0]).unwrap().label);
        assert!(report(-0.02).label);
        assert!(!report(-0.04).label);
        assert!(!apply_hla(report(0.9), false).label);
        assert!(apply_hla(report(-0.40), true).label);
        assert!(!apply_hla(report(-0.60), true).label);
        assert!(apply_hla(report(0.0), true).hla_used);
    }

    #[test]
    fn ensemble_moments() {
        let r = ensemble_diagnose(&[0.2, -0.2, 0.6]).unwrap();
        assert!((r.score - 0.2).abs() < 1e-15);
        assert!((r.variance - 0.32 / 3.0).abs() < 1e-15);
        assert!(ensemble_diagnose(&[]).is_err());
    }

    #[test]
    fn wilson_known_value() {
        // 8 of 10: centre (0.8 + 0.19207)/1.38415
        let (lo, hi) = wilson_interval(8, 10);
        assert!((lo - 0.4902).abs() < 1e-4 && (hi - 0.9433).abs() < 1e-4, "{lo} {hi}");
    }

    #[test]
    fn mills_ratio_is_continuous_at_switch() {
        let a = inverse_mills(-30.0 + 1e-9);
        let b = inverse_mills(-30.0 - 1e-9);
        assert!((a - b).abs() < 1e-6 * a, "{a} {b}");
        assert!((log_normal_cdf(-29.999999) - log_normal_cdf(-30.000001)).abs() < 1e-3);
    }
}
