use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    avg_pool, avg_pool_backward, conv1d, conv1d_backward, dense, dense_backward, sigmoid, softmax, KERNEL, POOL,
};
use super::{
    logit_gradient, sample_loss, HeadMode, LossKind, ModalityShape, ModelParams, NetworkConfig, ParamLayout,
    MODALITIES, N_STAGES,
};
use crate::error::{Error, Result};

/// Input for one segment: a flat `[channels, length]` array per branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub modalities: [Vec<f64>; 3],
}

/// Consecutive windows with optional stage targets (`None` = unscored).
#[derive(Debug, Clone, Copy)]
pub struct Sequence<'a> {
    pub windows: &'a [Window],
    pub targets: &'a [Option<usize>],
}

/// Fixed per-channel standardization applied before each branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: [Vec<f64>; 3],
    pub std: [Vec<f64>; 3],
}

impl InputNorm {
    pub fn identity(shapes: &[ModalityShape; 3]) -> Self {
        InputNorm {
            mean: shapes.map(|s| vec![0.0; s.channels]),
            std: shapes.map(|s| vec![1.0; s.channels]),
        }
    }

    /// Per-channel mean and population standard deviation over `windows`.
    /// Channels with no spread keep unit scale.
    pub fn fit<'a>(shapes: &[ModalityShape; 3], windows: impl Iterator<Item = &'a Window> + Clone) -> Self {
        let mut norm = InputNorm::identity(shapes);
        for (m, shape) in shapes.iter().enumerate() {
            for c in 0..shape.channels {
                let range = c * shape.length..(c + 1) * shape.length;
                let (mut n, mut sum) = (0usize, 0.0);
                for w in windows.clone() {
                    sum += w.modalities[m][range.clone()].iter().sum::<f64>();
                    n += shape.length;
                }
                if n == 0 {
                    continue;
                }
                let mean = sum / n as f64;
                let var = windows
                    .clone()
                    .map(|w| w.modalities[m][range.clone()].iter().map(|v| (v - mean).powi(2)).sum::<f64>())
                    .sum::<f64>()
                    / n as f64;
                norm.mean[m][c] = mean;
                norm.std[m][c] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
            }
        }
        norm
    }

    fn apply(&self, m: usize, shape: ModalityShape, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        for c in 0..shape.channels {
            let (mu, sd) = (self.mean[m][c], self.std[m][c]);
            for v in &mut out[c * shape.length..(c + 1) * shape.length] {
                *v = (*v - mu) / sd;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct ConvPlan {
    w: Range<usize>,
    b: Range<usize>,
    c_in: usize,
    f_out: usize,
    len_in: usize,
}

impl ConvPlan {
    fn conv_len(&self) -> usize {
        self.len_in + 1 - KERNEL
    }
}

#[derive(Debug, Clone)]
struct Plan {
    shapes: [ModalityShape; 3],
    branches: [Vec<ConvPlan>; 3],
    feature_len: usize,
    merge_w: Range<usize>,
    merge_b: Range<usize>,
    out_w: Range<usize>,
    out_b: Range<usize>,
    hidden: usize,
}

fn build_plan(config: &NetworkConfig) -> Result<(ParamLayout, Plan)> {
    config.validate()?;
    let shapes = config.input_shapes();
    let mut layout = ParamLayout::default();
    let mut branches: [Vec<ConvPlan>; 3] = Default::default();
    let mut feature_len = 0;
    for (m, name) in MODALITIES.iter().enumerate() {
        let (mut c_in, mut len) = (shapes[m].channels, shapes[m].length);
        let f_out = config.filters[m];
        for l in 0..config.conv_layers() {
            let w = layout.push(format!("{name}.conv{l}.w"), vec![f_out, c_in, KERNEL]);
            let b = layout.push(format!("{name}.conv{l}.b"), vec![f_out]);
            branches[m].push(ConvPlan { w, b, c_in, f_out, len_in: len });
            c_in = f_out;
            len = (len + 1 - KERNEL) / POOL;
        }
        feature_len += c_in * len;
    }
    let h = config.merge_units;
    let (merge_w, merge_b) = match config.mode {
        HeadMode::Ff => (
            layout.push("merge.w".into(), vec![h, feature_len]),
            layout.push("merge.b".into(), vec![h]),
        ),
        HeadMode::Lstm => (
            layout.push("lstm.w".into(), vec![4 * h, feature_len + h]),
            layout.push("lstm.b".into(), vec![4 * h]),
        ),
    };
    let out_w = layout.push("out.w".into(), vec![N_STAGES, h]);
    let out_b = layout.push("out.b".into(), vec![N_STAGES]);
    let plan = Plan {
        shapes,
        branches,
        feature_len,
        merge_w,
        merge_b,
        out_w,
        out_b,
        hidden: h,
    };
    Ok((layout, plan))
}

/// Per-layer inputs and tanh activations of one branch.
struct BranchCache {
    inputs: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
}

struct LstmStep {
    input: Vec<f64>,
    c_prev: Vec<f64>,
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
    dropped: Vec<f64>,
    mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub norm: InputNorm,
    pub params: ModelParams,
    plan_cache: PlanHandle,
}

// Plan is derived data; equality and debug output ignore it.
#[derive(Clone)]
struct PlanHandle(Plan);

impl std::fmt::Debug for PlanHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Plan")
    }
}

impl PartialEq for PlanHandle {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl Model {
    /// Fresh model with N(0, 0.01) parameters drawn from `config.seed`.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        let (layout, plan) = build_plan(&config)?;
        let params = ModelParams::init(layout, config.seed);
        let norm = InputNorm::identity(&plan.shapes);
        Ok(Model {
            config,
            norm,
            params,
            plan_cache: PlanHandle(plan),
        })
    }

    /// Rebuilds a model from stored parts, checking the layout.
    pub fn from_parts(config: NetworkConfig, norm: InputNorm, values: Vec<f64>) -> Result<Self> {
        let mut model = Model::new(config)?;
        if values.len() != model.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} stored parameters, config needs {}",
                values.len(),
                model.params.len()
            )));
        }
        for m in 0..3 {
            if norm.mean[m].len() != model.plan().shapes[m].channels || norm.std[m].len() != norm.mean[m].len() {
                return Err(Error::ShapeMismatch(format!("{} normalization size", MODALITIES[m])));
            }
        }
        model.params.values = values;
        model.norm = norm;
        Ok(model)
    }

    fn plan(&self) -> &Plan {
        &self.plan_cache.0
    }

    pub fn input_shapes(&self) -> [ModalityShape; 3] {
        self.plan().shapes
    }

    pub fn check_window(&self, w: &Window) -> Result<()> {
        for (m, shape) in self.plan().shapes.iter().enumerate() {
            if w.modalities[m].len() != shape.size() {
                return Err(Error::ShapeMismatch(format!(
                    "{} input has {} values, expected {}x{}",
                    MODALITIES[m],
                    w.modalities[m].len(),
                    shape.channels,
                    shape.length
                )));
            }
        }
        Ok(())
    }

    fn p(&self, r: &Range<usize>) -> &[f64] {
        &self.params.values[r.clone()]
    }

    fn branch_forward(&self, m: usize, x: &[f64]) -> (Vec<f64>, BranchCache) {
        let plan = self.plan();
        let mut cache = BranchCache { inputs: Vec::new(), acts: Vec::new() };
        let mut cur = self.norm.apply(m, plan.shapes[m], x);
        for layer in &plan.branches[m] {
            let mut a = conv1d(&cur, layer.c_in, layer.len_in, self.p(&layer.w), self.p(&layer.b), layer.f_out);
            a.iter_mut().for_each(|v| *v = v.tanh());
            let pooled = avg_pool(&a, layer.f_out, layer.conv_len());
            cache.inputs.push(std::mem::replace(&mut cur, pooled));
            cache.acts.push(a);
        }
        (cur, cache)
    }

    fn branch_backward(&self, m: usize, cache: &BranchCache, g_out: &[f64], grads: &mut [f64]) {
        let plan = self.plan();
        let mut g = g_out.to_vec();
        for (l, layer) in plan.branches[m].iter().enumerate().rev() {
            let mut ga = avg_pool_backward(&g, layer.f_out, layer.conv_len());
            for (d, a) in ga.iter_mut().zip(&cache.acts[l]) {
                *d *= 1.0 - a * a;
            }
            let (mut gw, mut gb) = (vec![0.0; layer.w.len()], vec![0.0; layer.b.len()]);
            let mut gx = if l > 0 { Some(vec![0.0; layer.c_in * layer.len_in]) } else { None };
            conv1d_backward(
                &cache.inputs[l],
                layer.c_in,
                layer.len_in,
                self.p(&layer.w),
                layer.f_out,
                &ga,
                &mut gw,
                &mut gb,
                gx.as_deref_mut(),
            );
            add(&mut grads[layer.w.clone()], &gw);
            add(&mut grads[layer.b.clone()], &gb);
            if let Some(gx) = gx {
                g = gx;
            }
        }
    }

    fn features(&self, w: &Window) -> (Vec<f64>, [BranchCache; 3]) {
        let (f0, c0) = self.branch_forward(0, &w.modalities[0]);
        let (f1, c1) = self.branch_forward(1, &w.modalities[1]);
        let (f2, c2) = self.branch_forward(2, &w.modalities[2]);
        let mut z = f0;
        z.extend(f1);
        z.extend(f2);
        (z, [c0, c1, c2])
    }

    fn features_backward(&self, caches: &[BranchCache; 3], gz: &[f64], grads: &mut [f64]) {
        let mut start = 0;
        for (m, cache) in caches.iter().enumerate() {
            let last = self.plan().branches[m].last().expect("at least one conv layer");
            let n = last.f_out * (last.conv_len() / POOL);
            self.branch_backward(m, cache, &gz[start..start + n], grads);
            start += n;
        }
    }

    fn lstm_step(&self, z: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let plan = self.plan();
        let h = plan.hidden;
        let mut input = z.to_vec();
        input.extend_from_slice(h_prev);
        let mut gates = dense(&input, self.p(&plan.merge_w), self.p(&plan.merge_b));
        for (k, v) in gates.iter_mut().enumerate() {
            *v = if (2 * h..3 * h).contains(&k) { v.tanh() } else { sigmoid(*v) };
        }
        let c: Vec<f64> = (0..h).map(|j| gates[h + j] * c_prev[j] + gates[j] * gates[2 * h + j]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        (input, gates, c, tanh_c)
    }

    fn head_logits(&self, hidden: &[f64]) -> Vec<f64> {
        dense(hidden, self.p(&self.plan().out_w), self.p(&self.plan().out_b))
    }

    /// Stage probabilities per window. FF windows are independent; the LSTM
    /// consumes windows in order, carrying state from the first window.
    /// With `rng` given, LSTM outputs are dropped out as in training.
    pub fn forward<R: Rng>(&self, windows: &[Window], rng: Option<&mut R>) -> Result<Vec<[f64; N_STAGES]>> {
        let targets = vec![None; windows.len()];
        let seq = Sequence { windows, targets: &targets };
        let mut scratch = Vec::new();
        self.run(seq, rng, None, LossKind::default(), &mut scratch)
    }

    /// Deterministic inference.
    pub fn predict(&self, windows: &[Window]) -> Result<Vec<[f64; N_STAGES]>> {
        self.forward::<rand_chacha::ChaCha8Rng>(windows, None)
    }

    /// Mean loss over the scored windows of `batch` plus `lambda ||w||^2`,
    /// and its gradient with respect to every parameter.
    pub fn loss_and_gradient<R: Rng>(
        &self,
        batch: &[Sequence<'_>],
        lambda: f64,
        kind: LossKind,
        mut rng: Option<&mut R>,
    ) -> Result<(f64, Vec<f64>)> {
        let n: usize = batch.iter().map(|s| s.targets.iter().flatten().count()).sum();
        let mut grads = vec![0.0; self.params.len()];
        let mut data_loss = 0.0;
        if n > 0 {
            let mut losses = Vec::new();
            for seq in batch {
                let scale = 1.0 / n as f64;
                self.run(*seq, rng.as_deref_mut(), Some((&mut grads, scale)), kind, &mut losses)?;
            }
            data_loss = losses.iter().sum::<f64>() / n as f64;
        }
        for (g, w) in grads.iter_mut().zip(&self.params.values) {
            *g += 2.0 * lambda * w;
        }
        Ok((data_loss + lambda * self.params.squared_norm(), grads))
    }

    /// Shared forward (and optional backward) pass over one sequence.
    /// Per-window losses of scored windows are appended to `losses`.
    fn run<R: Rng>(
        &self,
        seq: Sequence<'_>,
        mut rng: Option<&mut R>,
        mut backward: Option<(&mut Vec<f64>, f64)>,
        kind: LossKind,
        losses: &mut Vec<f64>,
    ) -> Result<Vec<[f64; N_STAGES]>> {
        if seq.windows.len() != seq.targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} windows but {} targets",
                seq.windows.len(),
                seq.targets.len()
            )));
        }
        for w in seq.windows {
            self.check_window(w)?;
        }
        let plan = self.plan();
        let h = plan.hidden;
        let mut probs = Vec::with_capacity(seq.windows.len());
        match self.config.mode {
            HeadMode::Ff => {
                for (w, target) in seq.windows.iter().zip(seq.targets) {
                    let (z, caches) = self.features(w);
                    let mut hid = dense(&z, self.p(&plan.merge_w), self.p(&plan.merge_b));
                    hid.iter_mut().for_each(|v| *v = v.tanh());
                    let p = softmax(&self.head_logits(&hid));
                    probs.push(p);
                    let (Some(y), Some((grads, scale))) = (target, backward.as_mut()) else {
                        continue;
                    };
                    losses.push(sample_loss(&p, *y, kind));
                    let gl: Vec<f64> = logit_gradient(&p, *y, kind).iter().map(|g| g * *scale).collect();
                    let mut gh = vec![0.0; h];
                    let (gw, gb) = split_pair(grads, &plan.out_w, &plan.out_b);
                    dense_backward(&hid, self.p(&plan.out_w), &gl, gw, gb, Some(&mut gh));
                    for (d, a) in gh.iter_mut().zip(&hid) {
                        *d *= 1.0 - a * a;
                    }
                    let mut gz = vec![0.0; plan.feature_len];
                    let (gw, gb) = split_pair(grads, &plan.merge_w, &plan.merge_b);
                    dense_backward(&z, self.p(&plan.merge_w), &gh, gw, gb, Some(&mut gz));
                    self.features_backward(&caches, &gz, grads);
                }
            }
            HeadMode::Lstm => {
                let keep = self.config.dropout_keep;
                let (mut h_prev, mut c_prev) = (vec![0.0; h], vec![0.0; h]);
                let mut steps = Vec::new();
                let mut branch_caches = Vec::new();
                for w in seq.windows {
                    let (z, caches) = self.features(w);
                    let (input, gates, c, tanh_c) = self.lstm_step(&z, &h_prev, &c_prev);
                    let hid: Vec<f64> = (0..h).map(|j| gates[3 * h + j] * tanh_c[j]).collect();
                    let mask = rng.as_deref_mut().map(|r| {
                        (0..h)
                            .map(|_| if r.random_bool(keep) { 1.0 / keep } else { 0.0 })
                            .collect::<Vec<f64>>()
                    });
                    let dropped: Vec<f64> = match &mask {
                        Some(m) => hid.iter().zip(m).map(|(a, b)| a * b).collect(),
                        None => hid.clone(),
                    };
                    probs.push(softmax(&self.head_logits(&dropped)));
                    if backward.is_some() {
                        steps.push(LstmStep {
                            input,
                            c_prev: c_prev.clone(),
                            gates,
                            tanh_c,
                            dropped,
                            mask,
                        });
                        branch_caches.push(caches);
                    }
                    h_prev = hid;
                    c_prev = c;
                }
                if let Some((grads, scale)) = backward {
                    let (mut dh_next, mut dc_next) = (vec![0.0; h], vec![0.0; h]);
                    let zl = plan.feature_len;
                    for t in (0..steps.len()).rev() {
                        let st = &steps[t];
                        let mut gh = vec![0.0; h];
                        if let Some(y) = seq.targets[t] {
                            let p = &probs[t];
                            losses.push(sample_loss(p, y, kind));
                            let gl: Vec<f64> = logit_gradient(p, y, kind).iter().map(|g| g * scale).collect();
                            let (gw, gb) = split_pair(grads, &plan.out_w, &plan.out_b);
                            dense_backward(&st.dropped, self.p(&plan.out_w), &gl, gw, gb, Some(&mut gh));
                            if let Some(m) = &st.mask {
                                gh.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
                            }
                        }
                        add(&mut gh, &dh_next);
                        let g = &st.gates;
                        let mut ga = vec![0.0; 4 * h];
                        for j in 0..h {
                            let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                            let tc = st.tanh_c[j];
                            let go = gh[j] * tc;
                            let gc = gh[j] * o * (1.0 - tc * tc) + dc_next[j];
                            ga[j] = gc * gg * i * (1.0 - i);
                            ga[h + j] = gc * st.c_prev[j] * f * (1.0 - f);
                            ga[2 * h + j] = gc * i * (1.0 - gg * gg);
                            ga[3 * h + j] = go * o * (1.0 - o);
                            dc_next[j] = gc * f;
                        }
                        let mut gu = vec![0.0; st.input.len()];
                        let (gw, gb) = split_pair(grads, &plan.merge_w, &plan.merge_b);
                        dense_backward(&st.input, self.p(&plan.merge_w), &ga, gw, gb, Some(&mut gu));
                        dh_next.copy_from_slice(&gu[zl..]);
                        self.features_backward(&branch_caches[t], &gu[..zl], grads);
                    }
                }
            }
        }
        Ok(probs)
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Disjoint mutable views of a weight range and the bias range right after it.
fn split_pair<'a>(grads: &'a mut [f64], w: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert_eq!(w.end, b.start);
    let (head, tail) = grads[w.start..b.end].split_at_mut(w.len());
    (head, tail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EncodingMode;
    use crate::neuralnet::{Complexity, HeadMode};

    fn zero_window(model: &Model) -> Window {
        Window {
            modalities: model.input_shapes().map(|s| vec![0.0; s.size()]),
        }
    }

    #[test]
    fn zero_params_give_uniform_output() {
        for mode in [HeadMode::Ff, HeadMode::Lstm] {
            let cfg = NetworkConfig::new(EncodingMode::Cc, mode, Complexity::Low, 5, 1);
            let mut model = Model::new(cfg).unwrap();
            model.params.values.fill(0.0);
            let w = zero_window(&model);
            for p in model.predict(&[w.clone(), w]).unwrap() {
                assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn shape_mismatch_reported() {
        let cfg = NetworkConfig::new(EncodingMode::Cc, HeadMode::Ff, Complexity::Low, 5, 1);
        let model = Model::new(cfg).unwrap();
        let mut w = zero_window(&model);
        w.modalities[2].pop();
        assert!(matches!(model.predict(&[w]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn layout_names_are_unique_and_contiguous() {
        let cfg = NetworkConfig::new(EncodingMode::Octave, HeadMode::Lstm, Complexity::High, 15, 1);
        let model = Model::new(cfg).unwrap();
        let t = &model.params.layout.tensors;
        for pair in t.windows(2) {
            assert_eq!(pair[0].offset + pair[0].len(), pair[1].offset);
            assert_ne!(pair[0].name, pair[1].name);
        }
        assert_eq!(model.params.layout.total(), model.params.len());
    }
}
