use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{InputNorm, Model, Sequence, Window};
use super::{
    sgd_momentum_step, HeadMode, LossKind, NetworkConfig, SgdMomentum, TrainState, BATCH_SIZE, HOLDOUT_FRACTION,
    LEARNING_RATE, LR_DECAY_STEPS, MOMENTUM, N_STAGES, PATIENCE, SHUFFLE_BLOCK_S, VALIDATE_EVERY, WEIGHT_DECAY,
};
use crate::encoding::{EncodedRecording, EncodingMode, Tensor, GRID_HOP_S};
use crate::error::{Error, Result};
use crate::signal_io::HypnogramLabels;

/// One recording's windows and per-window stage indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecording {
    pub recording_id: String,
    pub windows: Vec<Window>,
    pub targets: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub validate_every: usize,
    pub patience: usize,
    pub holdout_fraction: f64,
    pub block_s: u32,
    pub max_batches: usize,
    pub lambda: f64,
    pub optimizer: SgdMomentum,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: BATCH_SIZE,
            validate_every: VALIDATE_EVERY,
            patience: PATIENCE,
            holdout_fraction: HOLDOUT_FRACTION,
            block_s: SHUFFLE_BLOCK_S,
            max_batches: 20_000,
            lambda: WEIGHT_DECAY,
            optimizer: SgdMomentum {
                eta0: LEARNING_RATE,
                tau: LR_DECAY_STEPS,
                momentum: MOMENTUM,
            },
            loss: LossKind::OneVsRest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub batch: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub validation: Vec<ValidationPoint>,
    /// Batch count at the kept checkpoint (0 = initial parameters).
    pub best_batch: usize,
    pub best_accuracy: f64,
    pub batches_run: usize,
    pub early_stopped: bool,
}

/// Contiguous run of windows inside one recording.
#[derive(Debug, Clone, Copy)]
struct Block {
    rec: usize,
    start: usize,
    end: usize,
}

fn blocks(data: &[LabeledRecording], per_block: usize) -> Vec<Block> {
    let mut out = Vec::new();
    for (rec, r) in data.iter().enumerate() {
        let mut start = 0;
        while start < r.windows.len() {
            let end = (start + per_block).min(r.windows.len());
            if r.targets[start..end].iter().any(Option::is_some) {
                out.push(Block { rec, start, end });
            }
            start = end;
        }
    }
    out
}

fn block_seq<'a>(data: &'a [LabeledRecording], b: &Block) -> Sequence<'a> {
    let r = &data[b.rec];
    Sequence {
        windows: &r.windows[b.start..b.end],
        targets: &r.targets[b.start..b.end],
    }
}

fn argmax(p: &[f64; N_STAGES]) -> usize {
    (0..N_STAGES).fold(0, |best, k| if p[k] > p[best] { k } else { best })
}

fn block_accuracy(model: &Model, data: &[LabeledRecording], blocks: &[Block]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for b in blocks {
        let seq = block_seq(data, b);
        let probs = model.predict(seq.windows)?;
        for (p, t) in probs.iter().zip(seq.targets) {
            if let Some(y) = t {
                total += 1;
                hit += usize::from(argmax(p) == *y);
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Fraction of scored windows whose argmax matches, running each recording
/// as one sequence.
pub fn accuracy(model: &Model, data: &[LabeledRecording]) -> Result<f64> {
    let whole: Vec<Block> = (0..data.len())
        .map(|rec| Block { rec, start: 0, end: data[rec].windows.len() })
        .collect();
    block_accuracy(model, data, &whole)
}

/// Trains one network.
///
/// Windows are grouped into 5-minute blocks that are shuffled across
/// recordings; 10% of the blocks (at least one) are held out. Every
/// `validate_every` batches the held-out accuracy is measured; training stops
/// after `patience` consecutive validations without improvement, or at
/// `max_batches`. The returned model carries the best checkpoint, rounded to
/// `f32` so that it survives serialization unchanged.
pub fn train(data: &[LabeledRecording], net: &NetworkConfig, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    if data.len() < 2 {
        return Err(Error::DatasetTooSmall(format!("{} recordings, need at least 2", data.len())));
    }
    if cfg.batch_size == 0 || cfg.validate_every == 0 || cfg.patience == 0 {
        return Err(Error::InvalidConfig("batch_size, validate_every and patience must be positive".into()));
    }
    let mut model = Model::new(net.clone())?;
    for r in data {
        if r.windows.len() != r.targets.len() {
            return Err(Error::ShapeMismatch(format!("{}: windows and targets differ in length", r.recording_id)));
        }
        for w in &r.windows {
            model.check_window(w)?;
        }
    }
    let per_block = (cfg.block_s / net.segment_s).max(1) as usize;
    let mut all = blocks(data, per_block);
    if all.len() < 2 {
        return Err(Error::DatasetTooSmall(format!("{} scored blocks, need at least 2", all.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(net.seed);
    rng.set_stream(1);
    all.shuffle(&mut rng);
    let n_val = ((all.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, all.len() - 1);
    let (train_blocks, val_blocks) = all.split_at(all.len() - n_val);

    model.norm = InputNorm::fit(
        &model.input_shapes(),
        train_blocks.iter().flat_map(|b| data[b.rec].windows[b.start..b.end].iter()),
    );

    // FF batches are scored windows; LSTM batches are whole blocks.
    let units: Vec<Block> = match net.mode {
        HeadMode::Ff => train_blocks
            .iter()
            .flat_map(|b| (b.start..b.end).map(move |i| Block { rec: b.rec, start: i, end: i + 1 }))
            .filter(|b| data[b.rec].targets[b.start].is_some())
            .collect(),
        HeadMode::Lstm => train_blocks.to_vec(),
    };
    let units_per_batch = match net.mode {
        HeadMode::Ff => cfg.batch_size,
        HeadMode::Lstm => cfg.batch_size.div_ceil(per_block),
    };

    let mut state = TrainState::new(model.params.len());
    let mut best = (model.params.values.clone(), block_accuracy(&model, data, val_blocks)?, 0usize);
    let mut report = TrainReport {
        validation: Vec::new(),
        best_batch: 0,
        best_accuracy: best.1,
        batches_run: 0,
        early_stopped: false,
    };
    let mut stale = 0;
    let mut order = units.clone();
    'outer: while report.batches_run < cfg.max_batches {
        order.shuffle(&mut rng);
        for chunk in order.chunks(units_per_batch) {
            let batch: Vec<Sequence> = chunk.iter().map(|b| block_seq(data, b)).collect();
            let dropout = (net.mode == HeadMode::Lstm).then_some(&mut rng);
            let (_, grads) = model.loss_and_gradient(&batch, cfg.lambda, cfg.loss, dropout)?;
            sgd_momentum_step(&mut model.params, &grads, &mut state, &cfg.optimizer)?;
            report.batches_run += 1;
            let last = report.batches_run >= cfg.max_batches;
            if report.batches_run.is_multiple_of(cfg.validate_every) || last {
                let acc = block_accuracy(&model, data, val_blocks)?;
                log::debug!("batch {} validation accuracy {acc:.4}", report.batches_run);
                report.validation.push(ValidationPoint { batch: report.batches_run, accuracy: acc });
                if acc > best.1 {
                    best = (model.params.values.clone(), acc, report.batches_run);
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.patience {
                        report.early_stopped = true;
                        break 'outer;
                    }
                }
            }
            if last {
                break 'outer;
            }
        }
    }
    model.params.values = best.0.iter().map(|&v| v as f32 as f64).collect();
    report.best_batch = best.2;
    report.best_accuracy = best.1;
    Ok((model, report))
}

/// Largest relative error between the analytic gradient and central finite
/// differences (step `1e-4`) over `n` randomly chosen parameters.
/// Dropout is off so the loss is deterministic.
pub fn grad_check(model: &Model, seq: Sequence<'_>, lambda: f64, kind: LossKind, n: usize, seed: u64) -> Result<f64> {
    const STEP: f64 = 1e-4;
    const FLOOR: f64 = 1e-6;
    let none = None::<&mut ChaCha8Rng>;
    let (_, analytic) = model.loss_and_gradient(&[seq], lambda, kind, none)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, model.params.len(), n.min(model.params.len()));
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in picks {
        let w0 = model.params.values[i];
        probe.params.values[i] = w0 + STEP;
        let plus = probe.loss_and_gradient(&[seq], lambda, kind, None::<&mut ChaCha8Rng>)?.0;
        probe.params.values[i] = w0 - STEP;
        let minus = probe.loss_and_gradient(&[seq], lambda, kind, None::<&mut ChaCha8Rng>)?.0;
        probe.params.values[i] = w0;
        let numeric = (plus - minus) / (2.0 * STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn rows_of(t: &Tensor, name: &str, expect_cols: usize) -> Result<(usize, usize)> {
    if t.shape.len() != 2 || t.shape[1] != expect_cols {
        return Err(Error::ShapeMismatch(format!("{name} tensor shape {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Cuts an encoded recording into network windows of `segment_s` seconds.
///
/// Octave windows are the raw band samples of each segment. CC windows
/// average the grid rows whose centres fall inside the segment (nearest row
/// if none does).
pub fn windows_from_encoded(enc: &EncodedRecording, config: &NetworkConfig) -> Result<Vec<Window>> {
    if enc.mode != config.encoding {
        return Err(Error::InvalidConfig(format!(
            "network expects {:?} encoding, recording is {:?}",
            config.encoding, enc.mode
        )));
    }
    let shapes = config.input_shapes();
    match enc.mode {
        EncodingMode::Octave => {
            let seg = shapes[0].length;
            let tensors = [enc.tensor("EEG")?, enc.tensor("EOG")?, enc.tensor("EMG")?];
            let n = tensors[1].shape[1];
            for (m, t) in tensors.iter().enumerate() {
                if t.shape.len() != 2 || t.shape[1] != n || t.shape[0] < shapes[m].channels {
                    return Err(Error::ShapeMismatch(format!(
                        "octave tensor {} shape {:?}, need {} rows",
                        t.name, t.shape, shapes[m].channels
                    )));
                }
            }
            Ok((0..n / seg)
                .map(|i| Window {
                    modalities: std::array::from_fn(|m| {
                        let mut v = Vec::with_capacity(shapes[m].size());
                        for c in 0..shapes[m].channels {
                            let row = &tensors[m].data[c * n..(c + 1) * n];
                            v.extend(row[i * seg..(i + 1) * seg].iter().map(|&x| f64::from(x)));
                        }
                        v
                    }),
                })
                .collect())
        }
        EncodingMode::Cc => {
            let parts: [(&[&str], usize); 3] = [
                (&["EEG"], shapes[0].length),
                (&["EOG_L", "EOG_R", "EOG_X"], shapes[1].length),
                (&["EMG"], shapes[2].length),
            ];
            let mut grid = None;
            for (names, cols) in &parts {
                for name in *names {
                    let (rows, _) = rows_of(enc.tensor(name)?, name, *cols)?;
                    if *grid.get_or_insert(rows) != rows {
                        return Err(Error::ShapeMismatch(format!("{name} has {rows} grid rows")));
                    }
                }
            }
            let grid = grid.unwrap_or(0);
            if grid == 0 {
                return Err(Error::ShapeMismatch("empty CC grid".into()));
            }
            let seg = f64::from(config.segment_s);
            let n_windows = (enc.duration_s / seg + 1e-9).floor() as usize;
            let mut out = Vec::with_capacity(n_windows);
            for i in 0..n_windows {
                let (a, b) = (i as f64 * seg, (i + 1) as f64 * seg);
                let mut rows: Vec<usize> = (0..grid)
                    .filter(|&j| {
                        let c = EncodedRecording::cc_row_center_s(j);
                        a <= c && c < b
                    })
                    .collect();
                if rows.is_empty() {
                    let mid = (a + b) / 2.0;
                    let j = ((mid - EncodedRecording::cc_row_center_s(0)) / GRID_HOP_S).round().max(0.0) as usize;
                    rows.push(j.min(grid - 1));
                }
                let mut modalities: [Vec<f64>; 3] = Default::default();
                for (m, (names, cols)) in parts.iter().enumerate() {
                    for name in *names {
                        let t = enc.tensor(name)?;
                        let mut acc = vec![0.0; *cols];
                        for &j in &rows {
                            for (s, &v) in acc.iter_mut().zip(&t.data[j * cols..(j + 1) * cols]) {
                                *s += f64::from(v);
                            }
                        }
                        modalities[m].extend(acc.iter().map(|s| s / rows.len() as f64));
                    }
                }
                out.push(Window { modalities });
            }
            Ok(out)
        }
    }
}

/// Stage index for each window from the epoch containing its start.
pub fn targets_for_windows(hyp: &HypnogramLabels, n_windows: usize, segment_s: u32) -> Vec<Option<usize>> {
    (0..n_windows)
        .map(|i| {
            let epoch = i * segment_s as usize / hyp.epoch_s as usize;
            hyp.stages.get(epoch).and_then(|s| s.index())
        })
        .collect()
}
