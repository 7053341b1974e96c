//! Stage classifier: one convolutional branch per modality (EEG, EOG, EMG),
//! merged into either a dense layer or an LSTM, followed by a five-way
//! softmax. Parameters live in one flat `f64` store with named slices, and
//! gradients are computed by hand-written backpropagation.

mod archive;
pub mod layers;
mod model;
mod train;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoding::{EncodedRecording, EncodingMode};
use crate::error::{Error, Result};
use crate::hypnodensity::{aggregate_resolution, ensemble_hypnodensity, EnsembleHypnodensity, Hypnodensity};

pub use archive::{load_ensemble, load_model, save_ensemble, save_model, ENSEMBLE_MANIFEST};
pub use model::{InputNorm, Model, Sequence, Window};
pub use train::{
    accuracy, grad_check, targets_for_windows, train, windows_from_encoded, LabeledRecording,
    TrainConfig, TrainReport, ValidationPoint,
};

pub const N_STAGES: usize = 5;
pub const LEARNING_RATE: f64 = 0.005;
pub const LR_DECAY_STEPS: f64 = 12_000.0;
pub const MOMENTUM: f64 = 0.9;
pub const WEIGHT_DECAY: f64 = 1e-5;
/// Variance of the zero-mean normal used for every initial parameter.
pub const INIT_VARIANCE: f64 = 0.01;
pub const DROPOUT_KEEP: f64 = 0.5;
pub const ENSEMBLE_SIZE: usize = 16;
pub const ENSEMBLE_SCALE_RANGE: (f64, f64) = (0.5, 1.5);
pub const BATCH_SIZE: usize = 64;
pub const VALIDATE_EVERY: usize = 50;
pub const PATIENCE: usize = 3;
pub const HOLDOUT_FRACTION: f64 = 0.1;
pub const SHUFFLE_BLOCK_S: u32 = 300;
pub const LOG_CLAMP: f64 = 1e-12;

/// Lag counts of the CC branches, fixed by the CC parameters at 100 Hz.
pub const CC_EEG_LAGS: usize = 201;
pub const CC_EOG_LAGS: usize = 401;
pub const CC_EMG_LAGS: usize = 41;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Ff,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Complexity {
    Low,
    High,
}

impl Complexity {
    pub fn filters(self) -> usize {
        match self {
            Complexity::Low => 4,
            Complexity::High => 8,
        }
    }

    pub fn merge_units(self) -> usize {
        match self {
            Complexity::Low => 16,
            Complexity::High => 32,
        }
    }
}

/// Training objective. `OneVsRest` is the summed per-class binary
/// cross-entropy over the softmax outputs; `Categorical` is the usual
/// `-log p[y]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    OneVsRest,
    Categorical,
}

/// Channels and samples (or lags) fed to one branch per window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityShape {
    pub channels: usize,
    pub length: usize,
}

impl ModalityShape {
    pub fn size(&self) -> usize {
        self.channels * self.length
    }
}

pub const MODALITIES: [&str; 3] = ["eeg", "eog", "emg"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub mode: HeadMode,
    pub complexity: Complexity,
    pub encoding: EncodingMode,
    pub segment_s: u32,
    /// EEG rows used in octave mode (5 per EEG channel; 5 keeps the central
    /// derivation only). Ignored in CC mode.
    pub eeg_channels: usize,
    /// Convolution filters per branch, in EEG, EOG, EMG order.
    pub filters: [usize; 3],
    /// Dense hidden units (FF) or LSTM cell size.
    pub merge_units: usize,
    pub dropout_keep: f64,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn new(encoding: EncodingMode, mode: HeadMode, complexity: Complexity, segment_s: u32, seed: u64) -> Self {
        NetworkConfig {
            mode,
            complexity,
            encoding,
            segment_s,
            eeg_channels: 5,
            filters: [complexity.filters(); 3],
            merge_units: complexity.merge_units(),
            dropout_keep: DROPOUT_KEEP,
            seed,
        }
    }

    pub fn conv_layers(&self) -> usize {
        match self.encoding {
            EncodingMode::Cc => 2,
            EncodingMode::Octave => 3,
        }
    }

    pub fn input_shapes(&self) -> [ModalityShape; 3] {
        let s = |channels, length| ModalityShape { channels, length };
        match self.encoding {
            EncodingMode::Cc => [s(1, CC_EEG_LAGS), s(3, CC_EOG_LAGS), s(1, CC_EMG_LAGS)],
            EncodingMode::Octave => {
                let n = self.segment_s as usize * 100;
                [s(self.eeg_channels, n), s(10, n), s(5, n)]
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.segment_s == 0 || 30 % self.segment_s != 0 {
            return bad(format!("segment_s {} must divide 30", self.segment_s));
        }
        if self.filters.contains(&0) || self.merge_units == 0 {
            return bad("layer sizes must be positive".into());
        }
        if self.eeg_channels == 0 || !self.eeg_channels.is_multiple_of(5) {
            return bad(format!("eeg_channels {} must be a positive multiple of 5", self.eeg_channels));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return bad(format!("dropout_keep {} outside (0, 1]", self.dropout_keep));
        }
        for (name, shape) in MODALITIES.iter().zip(self.input_shapes()) {
            let mut len = shape.length;
            for _ in 0..self.conv_layers() {
                if len < layers::KERNEL + layers::POOL - 1 {
                    return bad(format!("{name} input too short for {} conv layers", self.conv_layers()));
                }
                len = (len + 1 - layers::KERNEL) / layers::POOL;
            }
        }
        Ok(())
    }

    /// Number of windows per 30 s epoch.
    pub fn windows_per_epoch(&self) -> usize {
        (30 / self.segment_s) as usize
    }
}

/// One named parameter tensor inside the flat store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
}

impl ParamLayout {
    fn push(&mut self, name: String, shape: Vec<usize>) -> Range<usize> {
        let offset = self.total();
        self.tensors.push(TensorSpec { name, shape, offset });
        self.tensors.last().expect("just pushed").range()
    }

    pub fn total(&self) -> usize {
        self.tensors.last().map_or(0, |t| t.offset + t.len())
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Name of the tensor holding flat index `i`.
    pub fn name_of(&self, i: usize) -> &str {
        self.tensors
            .iter()
            .find(|t| t.range().contains(&i))
            .map_or("?", |t| t.name.as_str())
    }
}

/// Flat parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl ModelParams {
    /// Draws every parameter from N(0, INIT_VARIANCE).
    pub fn init(layout: ParamLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_VARIANCE.sqrt()).expect("valid normal");
        let values = (0..layout.total()).map(|_| normal.sample(&mut rng)).collect();
        ModelParams { layout, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|t| &self.values[t.range()])
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// SGD with momentum and an exponentially decaying step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub eta0: f64,
    pub tau: f64,
    pub momentum: f64,
}

impl Default for SgdMomentum {
    fn default() -> Self {
        SgdMomentum {
            eta0: LEARNING_RATE,
            tau: LR_DECAY_STEPS,
            momentum: MOMENTUM,
        }
    }
}

impl SgdMomentum {
    pub fn learning_rate(&self, step: u64) -> f64 {
        self.eta0 * (-(step as f64) / self.tau).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub velocity: Vec<f64>,
    pub step: u64,
}

impl TrainState {
    pub fn new(n_params: usize) -> Self {
        TrainState {
            velocity: vec![0.0; n_params],
            step: 0,
        }
    }
}

/// `v <- alpha v - g; w <- w + eta(t) v; t <- t + 1`. A non-finite gradient
/// aborts before anything is modified.
pub fn sgd_momentum_step(params: &mut ModelParams, grads: &[f64], state: &mut TrainState, opt: &SgdMomentum) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} params, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            index,
            name: params.layout.name_of(index).to_string(),
            step: state.step,
        });
    }
    let eta = opt.learning_rate(state.step);
    for ((w, v), g) in params.values.iter_mut().zip(&mut state.velocity).zip(grads) {
        *v = opt.momentum * *v - g;
        *w += eta * *v;
    }
    state.step += 1;
    Ok(())
}

/// Mean per-window loss plus `lambda * ||w||^2`.
pub fn loss(preds: &[[f64; N_STAGES]], targets: &[usize], params: &[f64], lambda: f64, kind: LossKind) -> f64 {
    let data: f64 = preds.iter().zip(targets).map(|(p, &y)| sample_loss(p, y, kind)).sum();
    let n = preds.len().max(1) as f64;
    data / n + lambda * params.iter().map(|v| v * v).sum::<f64>()
}

pub(crate) fn sample_loss(p: &[f64; N_STAGES], y: usize, kind: LossKind) -> f64 {
    let ln = |v: f64| v.max(LOG_CLAMP).ln();
    match kind {
        LossKind::Categorical => -ln(p[y]),
        LossKind::OneVsRest => -(0..N_STAGES)
            .map(|k| if k == y { ln(p[k]) } else { ln(1.0 - p[k]) })
            .sum::<f64>(),
    }
}

/// Gradient of `sample_loss` with respect to the softmax logits.
pub(crate) fn logit_gradient(p: &[f64; N_STAGES], y: usize, kind: LossKind) -> [f64; N_STAGES] {
    let mut g = [0.0; N_STAGES];
    match kind {
        LossKind::Categorical => {
            g.copy_from_slice(p);
            g[y] -= 1.0;
        }
        LossKind::OneVsRest => {
            // t_j = p_j * dL/dp_j, then dL/dz_j = t_j - p_j * sum_k t_k
            let mut t = [0.0; N_STAGES];
            for k in 0..N_STAGES {
                t[k] = if k == y { -1.0 } else { p[k] / (1.0 - p[k]).max(LOG_CLAMP) };
            }
            let s: f64 = t.iter().sum();
            for k in 0..N_STAGES {
                g[k] = t[k] - p[k] * s;
            }
        }
    }
    g
}

/// `n` variants of `template` with every layer size independently scaled by
/// U(0.5, 1.5), rounded, at least 1. Each member gets its own seed.
pub fn make_ensemble(template: &NetworkConfig, n: usize, seed: u64) -> Vec<NetworkConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = ENSEMBLE_SCALE_RANGE;
    let scale = |s: usize, rng: &mut ChaCha8Rng| ((rng.random_range(lo..hi) * s as f64).round() as usize).max(1);
    (0..n)
        .map(|_| {
            let mut c = template.clone();
            for f in &mut c.filters {
                *f = scale(*f, &mut rng);
            }
            c.merge_units = scale(c.merge_units, &mut rng);
            c.seed = rng.random();
            c
        })
        .collect()
}

/// Runs every model over an encoded recording and combines the per-model
/// hypnodensities (at the models' segment resolution) into ensemble mean and
/// variance.
pub fn score_recording(models: &[Model], enc: &EncodedRecording) -> Result<EnsembleHypnodensity> {
    ensemble_hypnodensity(&member_hypnodensities(models, enc, None)?)
}

/// Per-model hypnodensities, each aggregated to `resolution_s` when given.
pub fn member_hypnodensities(
    models: &[Model],
    enc: &EncodedRecording,
    resolution_s: Option<u32>,
) -> Result<Vec<Hypnodensity>> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidConfig("ensemble has no members".into()))?;
    if first.config.encoding != enc.mode {
        return Err(Error::InvalidConfig(format!(
            "ensemble expects {} encoding, recording is {}",
            first.config.encoding, enc.mode
        )));
    }
    models
        .iter()
        .map(|m| {
            if m.config.segment_s != first.config.segment_s || m.config.encoding != first.config.encoding {
                return Err(Error::InvalidConfig("ensemble members disagree on encoding or segment length".into()));
            }
            let windows = windows_from_encoded(enc, &m.config)?;
            let probs = m.predict(&windows)?;
            let hd = Hypnodensity::new(enc.recording_id.clone(), m.config.segment_s, probs)?;
            match resolution_s {
                Some(r) if r != hd.resolution_s => aggregate_resolution(&hd, r),
                _ => Ok(hd),
            }
        })
        .collect()
}
