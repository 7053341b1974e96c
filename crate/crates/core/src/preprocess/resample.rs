//! Polyphase rational resampling with a Kaiser-windowed sinc anti-alias
//! filter.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const KAISER_BETA: f64 = 5.0;
const HALF_LEN_PER_FACTOR: usize = 10;
const MAX_FACTOR: u64 = 4096;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Modified Bessel function of the first kind, order 0.
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Reduced `(up, down)` ratio for `fs_out / fs_in`, resolved to millihertz.
fn ratio(fs_in: f64, fs_out: f64) -> Result<(usize, usize)> {
    let to_milli = |f: f64| (f * 1000.0).round() as u64;
    let (a, b) = (to_milli(fs_out), to_milli(fs_in));
    if a == 0 || b == 0 {
        return Err(Error::UnsupportedRate { fs_in, fs_out });
    }
    let g = gcd(a, b);
    let (up, down) = (a / g, b / g);
    if up > MAX_FACTOR || down > MAX_FACTOR {
        return Err(Error::UnsupportedRate { fs_in, fs_out });
    }
    Ok((up as usize, down as usize))
}

fn design_taps(up: usize, down: usize) -> Vec<f64> {
    let factor = up.max(down);
    let half = HALF_LEN_PER_FACTOR * factor;
    let len = 2 * half + 1;
    let cutoff = 1.0 / factor as f64;
    let norm = bessel_i0(KAISER_BETA);
    (0..len)
        .map(|i| {
            let t = i as f64 - half as f64;
            let sinc = if t == 0.0 {
                cutoff
            } else {
                (PI * cutoff * t).sin() / (PI * t)
            };
            let r = t / half as f64;
            let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
            sinc * w * up as f64
        })
        .collect()
}

/// Resamples `x` from `fs_in` to `fs_out` (downsampling only).
///
/// Output length is `round(len * fs_out / fs_in)`; the filter delay is
/// compensated so output sample `m` sits at time `m / fs_out`.
pub fn resample(x: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>> {
    if !(fs_out > 0.0) || fs_in < fs_out {
        return Err(Error::UnsupportedRate { fs_in, fs_out });
    }
    if fs_in == fs_out {
        return Ok(x.to_vec());
    }
    let (up, down) = ratio(fs_in, fs_out)?;
    if up == down {
        return Ok(x.to_vec());
    }
    let taps = design_taps(up, down);
    let half = (taps.len() - 1) / 2;
    let n_out = (x.len() as f64 * up as f64 / down as f64).round() as usize;
    let mut out = Vec::with_capacity(n_out);
    for m in 0..n_out {
        // y[m] = sum_n x[n] h[m*down + half - n*up]
        let t = m * down + half;
        let n_hi = (t / up).min(x.len().saturating_sub(1));
        let n_lo = if t + 1 > taps.len() {
            (t + 1 - taps.len()).div_ceil(up)
        } else {
            0
        };
        let mut acc = 0.0;
        let mut n = n_lo;
        while n <= n_hi && n < x.len() {
            acc += x[n] * taps[t - n * up];
            n += 1;
        }
        out.push(acc);
    }
    Ok(out)
}
