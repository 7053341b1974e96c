//! Layer primitives and their backward passes. All tensors are flat
//! row-major `f64` slices.

pub const KERNEL: usize = 5;
pub const POOL: usize = 4;

/// Valid 1-D convolution: `y[f, t] = b[f] + sum_{c,k} w[f, c, k] * x[c, t + k]`.
pub fn conv1d(x: &[f64], c_in: usize, len: usize, w: &[f64], b: &[f64], f_out: usize) -> Vec<f64> {
    let out_len = len + 1 - KERNEL;
    let mut y = vec![0.0; f_out * out_len];
    for f in 0..f_out {
        let row = &mut y[f * out_len..(f + 1) * out_len];
        row.fill(b[f]);
        for c in 0..c_in {
            let xc = &x[c * len..(c + 1) * len];
            let wk = &w[(f * c_in + c) * KERNEL..(f * c_in + c + 1) * KERNEL];
            for (k, &wv) in wk.iter().enumerate() {
                for (yt, xt) in row.iter_mut().zip(&xc[k..k + out_len]) {
                    *yt += wv * xt;
                }
            }
        }
    }
    y
}

/// Accumulates weight and bias gradients; writes the input gradient when
/// `gx` is given.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    x: &[f64],
    c_in: usize,
    len: usize,
    w: &[f64],
    f_out: usize,
    gy: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    mut gx: Option<&mut [f64]>,
) {
    let out_len = len + 1 - KERNEL;
    if let Some(gx) = gx.as_deref_mut() {
        gx.fill(0.0);
    }
    for f in 0..f_out {
        let g = &gy[f * out_len..(f + 1) * out_len];
        gb[f] += g.iter().sum::<f64>();
        for c in 0..c_in {
            let xc = &x[c * len..(c + 1) * len];
            let base = (f * c_in + c) * KERNEL;
            for k in 0..KERNEL {
                gw[base + k] += g.iter().zip(&xc[k..k + out_len]).map(|(a, b)| a * b).sum::<f64>();
            }
            if let Some(gx) = gx.as_deref_mut() {
                let gxc = &mut gx[c * len..(c + 1) * len];
                for k in 0..KERNEL {
                    let wv = w[base + k];
                    for (d, gt) in gxc[k..k + out_len].iter_mut().zip(g) {
                        *d += wv * gt;
                    }
                }
            }
        }
    }
}

/// Non-overlapping mean pooling; a trailing partial window is dropped.
pub fn avg_pool(x: &[f64], ch: usize, len: usize) -> Vec<f64> {
    let out_len = len / POOL;
    let mut y = Vec::with_capacity(ch * out_len);
    for c in 0..ch {
        let xc = &x[c * len..(c + 1) * len];
        y.extend(xc.chunks_exact(POOL).map(|w| w.iter().sum::<f64>() / POOL as f64));
    }
    y
}

pub fn avg_pool_backward(gy: &[f64], ch: usize, len: usize) -> Vec<f64> {
    let out_len = len / POOL;
    let mut gx = vec![0.0; ch * len];
    for c in 0..ch {
        for j in 0..out_len {
            let g = gy[c * out_len + j] / POOL as f64;
            gx[c * len + j * POOL..c * len + (j + 1) * POOL].fill(g);
        }
    }
    gx
}

/// `y = W x + b` with `W` shaped `[n_out, n_in]`.
pub fn dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| bo + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

pub fn dense_backward(x: &[f64], w: &[f64], gy: &[f64], gw: &mut [f64], gb: &mut [f64], gx: Option<&mut [f64]>) {
    let n_in = x.len();
    for (o, &g) in gy.iter().enumerate() {
        gb[o] += g;
        for (d, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
            *d += g * xi;
        }
    }
    if let Some(gx) = gx {
        gx.fill(0.0);
        for (o, &g) in gy.iter().enumerate() {
            for (d, wi) in gx.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                *d += g * wi;
            }
        }
    }
}

pub fn softmax(z: &[f64]) -> [f64; 5] {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut p = [0.0; 5];
    for (pi, zi) in p.iter_mut().zip(z) {
        *pi = (zi - m).exp();
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
