//! Butterworth IIR design as cascaded second-order sections, and zero-phase
//! (forward-backward) application.
//!
//! Sections come from the analog prototype poles mapped through the bilinear
//! transform with the cutoff pre-warped, so the -3 dB point of a single pass
//! lands exactly on `cutoff_hz`. Forward-backward application squares the
//! magnitude response and cancels the phase.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Highpass,
    Lowpass,
}

/// Description of a filter stage. `bidirectional` selects zero-phase
/// application.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub order: usize,
    pub cutoff_hz: f64,
    pub bidirectional: bool,
}

impl FilterSpec {
    pub fn lowpass(order: usize, cutoff_hz: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Lowpass,
            order,
            cutoff_hz,
            bidirectional: true,
        }
    }

    pub fn highpass(order: usize, cutoff_hz: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Highpass,
            order,
            cutoff_hz,
            bidirectional: true,
        }
    }

    pub fn design(&self, fs: f64) -> Result<Sos> {
        Sos::butterworth(self.kind, self.order, self.cutoff_hz, fs)
    }

    /// Filters `x`, zero-phase when `bidirectional` is set.
    pub fn apply(&self, x: &[f64], fs: f64) -> Result<Vec<f64>> {
        let sos = self.design(fs)?;
        if self.bidirectional {
            sos.filtfilt(x)
        } else {
            Ok(sos.filter(x))
        }
    }
}

/// One biquad, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Section {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Section {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }

    fn is_first_order(&self) -> bool {
        self.b[2] == 0.0 && self.a[2] == 0.0
    }

    /// Transposed direct form II state that yields a steady output for a unit
    /// step input.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z2 = self.b[2] - self.a[2] * g;
        let z1 = self.b[1] - self.a[1] * g + z2;
        [z1, z2]
    }

    fn run(&self, x: &mut [f64], mut z: [f64; 2]) {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        for v in x.iter_mut() {
            let input = *v;
            let y = b0 * input + z[0];
            z[0] = b1 * input - a1 * y + z[1];
            z[1] = b2 * input - a2 * y;
            *v = y;
        }
    }

    /// Complex frequency response at `f_hz`.
    fn response(&self, f_hz: f64, fs: f64) -> (f64, f64) {
        let w = 2.0 * PI * f_hz / fs;
        let eval = |c: &[f64; 3]| {
            let re = c[0] + c[1] * w.cos() + c[2] * (2.0 * w).cos();
            let im = -c[1] * w.sin() - c[2] * (2.0 * w).sin();
            (re, im)
        };
        let (nr, ni) = eval(&self.b);
        let (dr, di) = eval(&self.a);
        let den = dr * dr + di * di;
        ((nr * dr + ni * di) / den, (ni * dr - nr * di) / den)
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<Section>,
}

impl Sos {
    pub fn butterworth(kind: FilterKind, order: usize, cutoff_hz: f64, fs: f64) -> Result<Sos> {
        if order == 0 {
            return Err(Error::InvalidFilter("order must be at least 1".into()));
        }
        if !(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0) {
            return Err(Error::InvalidFilter(format!(
                "cutoff {cutoff_hz} Hz outside (0, {}) for fs {fs} Hz",
                fs / 2.0
            )));
        }
        let wc = (PI * cutoff_hz / fs).tan();
        let mut sections = Vec::with_capacity(order.div_ceil(2));
        if order % 2 == 1 {
            let k = 1.0 / (1.0 + wc);
            let a = [1.0, (wc - 1.0) * k, 0.0];
            let b = match kind {
                FilterKind::Lowpass => [wc * k, wc * k, 0.0],
                FilterKind::Highpass => [k, -k, 0.0],
            };
            sections.push(Section { b, a });
        }
        for pair in 0..order / 2 {
            // s^2 + 2 sin(theta) wc s + wc^2, theta = pi (2k+1) / (2N)
            let damping = 2.0 * (PI * (2 * pair + 1) as f64 / (2 * order) as f64).sin() * wc;
            let wc2 = wc * wc;
            let a0 = 1.0 + damping + wc2;
            let a = [1.0, (2.0 * wc2 - 2.0) / a0, (1.0 - damping + wc2) / a0];
            let b = match kind {
                FilterKind::Lowpass => [wc2 / a0, 2.0 * wc2 / a0, wc2 / a0],
                FilterKind::Highpass => [1.0 / a0, -2.0 / a0, 1.0 / a0],
            };
            sections.push(Section { b, a });
        }
        Ok(Sos { sections })
    }

    /// Magnitude of a single forward pass at `f_hz`.
    pub fn magnitude(&self, f_hz: f64, fs: f64) -> f64 {
        let (mut re, mut im) = (1.0, 0.0);
        for s in &self.sections {
            let (r, i) = s.response(f_hz, fs);
            (re, im) = (re * r - im * i, re * i + im * r);
        }
        (re * re + im * im).sqrt()
    }

    /// Single causal pass from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            s.run(&mut y, [0.0, 0.0]);
        }
        y
    }

    /// Per-section initial state for a unit step, scaled by the DC gain of
    /// the sections before it.
    fn step_states(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let z = s.step_state();
                let out = [z[0] * scale, z[1] * scale];
                scale *= s.dc_gain();
                out
            })
            .collect()
    }

    fn run_with_state(&self, x: &mut [f64], x0: f64, states: &[[f64; 2]]) {
        for (s, z) in self.sections.iter().zip(states) {
            s.run(x, [z[0] * x0, z[1] * x0]);
        }
    }

    fn pad_len(&self) -> usize {
        let first_order = self.sections.iter().filter(|s| s.is_first_order()).count();
        3 * (2 * self.sections.len() + 1 - first_order.min(1))
    }

    /// Forward-backward filtering with odd-reflection padding and
    /// steady-state initial conditions on both passes.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        let order: usize = self
            .sections
            .iter()
            .map(|s| if s.is_first_order() { 1 } else { 2 })
            .sum();
        let min = 6 * order;
        if x.len() < min {
            return Err(Error::SignalTooShort { len: x.len(), min });
        }
        let pad = self.pad_len().min(x.len() - 1);
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * pad);
        let (first, last) = (x[0], x[n - 1]);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

        let states = self.step_states();
        let x0 = ext[0];
        self.run_with_state(&mut ext, x0, &states);
        ext.reverse();
        let x0 = ext[0];
        self.run_with_state(&mut ext, x0, &states);
        ext.reverse();
        Ok(ext[pad..pad + n].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_power_at_cutoff() {
        for &(kind, fc, fs) in &[
            (FilterKind::Lowpass, 49.0, 100.0),
            (FilterKind::Lowpass, 12.5, 100.0),
            (FilterKind::Highpass, 0.2, 100.0),
            (FilterKind::Highpass, 0.2, 256.0),
        ] {
            let sos = Sos::butterworth(kind, 5, fc, fs).unwrap();
            let m = sos.magnitude(fc, fs);
            assert!((m - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9, "{kind:?} {fc} {m}");
        }
    }

    #[test]
    fn unity_gain_in_passband_edges() {
        let lp = Sos::butterworth(FilterKind::Lowpass, 5, 49.0, 200.0).unwrap();
        assert!((lp.magnitude(0.0, 200.0) - 1.0).abs() < 1e-12);
        let hp = Sos::butterworth(FilterKind::Highpass, 5, 0.2, 200.0).unwrap();
        assert!(hp.magnitude(0.0, 200.0).abs() < 1e-12);
        assert!((hp.magnitude(99.999, 200.0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn matches_analog_butterworth_after_prewarp() {
        // |H| = 1 / sqrt(1 + (tan(pi f / fs) / tan(pi fc / fs))^(2N))
        let (fc, fs, n) = (25.0, 100.0, 5);
        let sos = Sos::butterworth(FilterKind::Lowpass, n, fc, fs).unwrap();
        for f in [1.0, 10.0, 20.0, 30.0, 40.0, 45.0] {
            let r = (PI * f / fs).tan() / (PI * fc / fs).tan();
            let expect = 1.0 / (1.0 + r.powi(2 * n as i32)).sqrt();
            assert!((sos.magnitude(f, fs) - expect).abs() < 1e-9, "f={f}");
        }
    }

    #[test]
    fn rejects_cutoff_above_nyquist() {
        assert!(Sos::butterworth(FilterKind::Lowpass, 5, 60.0, 100.0).is_err());
        assert!(Sos::butterworth(FilterKind::Lowpass, 0, 10.0, 100.0).is_err());
    }

    #[test]
    fn filtfilt_rejects_tiny_input() {
        let sos = Sos::butterworth(FilterKind::Lowpass, 5, 10.0, 100.0).unwrap();
        assert!(matches!(sos.filtfilt(&[1.0; 29]), Err(Error::SignalTooShort { min: 30, .. })));
        assert!(sos.filtfilt(&[1.0; 30]).is_ok());
    }

    #[test]
    fn lowpass_passes_constant_exactly_from_first_sample() {
        let sos = Sos::butterworth(FilterKind::Lowpass, 5, 10.0, 100.0).unwrap();
        let y = sos.filtfilt(&[3.5; 500]).unwrap();
        assert!(y.iter().all(|v| (v - 3.5).abs() < 1e-9));
    }
}
