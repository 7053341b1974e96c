//! Independent loop-based recomputation of the hypnodensity feature vector.

use hypnos_core::hypnodensity::Hypnodensity;
use hypnos_core::{HypnogramLabels, Stage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Sticky random hypnodensity: a dominant stage that persists for a while.
pub fn random_hd(r: &mut ChaCha8Rng, resolution_s: u32, n: usize) -> Hypnodensity {
    let mut dominant = 0;
    let rows = (0..n)
        .map(|_| {
            if r.random_bool(0.03) {
                dominant = r.random_range(0..5);
            }
            let mut row: [f64; 5] = std::array::from_fn(|_| r.random_range(0.0..0.3));
            row[dominant] += r.random_range(0.5..2.0);
            let s: f64 = row.iter().sum();
            row.map(|v| v / s)
        })
        .collect();
    Hypnodensity::new("rec", resolution_s, rows).unwrap()
}

pub const STAGE_NAMES: [&str; 5] = ["W", "N1", "N2", "N3", "REM"];

pub fn oracle_combos() -> Vec<Vec<usize>> {
    fn choose(start: usize, k: usize, acc: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 0 {
            out.push(acc.clone());
            return;
        }
        for i in start..5 {
            acc.push(i);
            choose(i + 1, k - 1, acc, out);
            acc.pop();
        }
    }
    let mut out = Vec::new();
    for k in 1..=5 {
        choose(0, k, &mut Vec::new(), &mut out);
    }
    out
}

pub fn oracle_descriptors(x: &[f64], res: f64) -> Vec<f64> {
    let n = x.len();
    let mut total = 0.0;
    for v in x {
        total += v;
    }
    let mean = total / n as f64;
    let mut max = x[0];
    let mut var = 0.0;
    for v in x {
        if *v > max {
            max = *v;
        }
        var += (v - mean) * (v - mean);
    }
    let std = (var / n as f64).sqrt();
    let (mut dsum, mut dmax) = (0.0, 0.0);
    for i in 1..n {
        let d = (x[i] - x[i - 1]).abs();
        dsum += d;
        if d > dmax {
            dmax = d;
        }
    }
    let dmean = if n > 1 { dsum / (n - 1) as f64 } else { 0.0 };
    let mut entropy = 0.0;
    if total > 0.0 {
        for v in x {
            if *v > 0.0 {
                entropy -= (v / total) * (v / total).ln();
            }
        }
    }
    let mut out = vec![mean, max, std, dmean, dmax, entropy];
    for p in [5.0, 10.0, 30.0, 50.0, 70.0, 90.0] {
        let mut minutes = 0.0;
        if total > 0.0 {
            let mut cum = vec![0.0; n];
            let mut acc = 0.0;
            for i in 0..n {
                acc += x[i];
                cum[i] = acc;
            }
            let hit = (0..n).find(|&i| cum[i] >= p / 100.0 * total - 1e-12 * total).unwrap_or(n - 1);
            minutes = (hit + 1) as f64 * res / 60.0;
        }
        out.push(minutes * total);
    }
    out.push(total);
    let above = if max > 0.0 { x.iter().filter(|v| **v > max / 2.0).count() as f64 / n as f64 } else { 0.0 };
    out.push(above);
    let mut ups = 0;
    for i in 1..n {
        if x[i - 1] - mean < 0.0 && x[i] - mean >= 0.0 {
            ups += 1;
        }
    }
    out.push(ups as f64 / (n as f64 * res / 3600.0));
    out
}

pub fn wake_like(s: Stage) -> bool {
    matches!(s, Stage::W | Stage::N1 | Stage::Unscored)
}

/// Length in seconds of the same-class run ending at epoch `i`.
pub fn run_back(st: &[Stage], i: usize, class: impl Fn(Stage) -> bool, epoch: f64) -> f64 {
    let mut k = i as isize;
    let mut len = 0.0;
    while k >= 0 && class(st[k as usize]) {
        len += epoch;
        k -= 1;
    }
    len
}

pub fn oracle_sequencing(h: &HypnogramLabels) -> Vec<f64> {
    let st = &h.stages;
    let e = f64::from(h.epoch_s);
    let n = st.len();
    let dur = n as f64 * e / 60.0;
    let onset = st.iter().position(|s| *s != Stage::W && *s != Stage::Unscored);
    let (sl, rl) = match onset {
        None => (dur, dur),
        Some(o) => {
            let sl = o as f64 * e / 60.0;
            match st.iter().position(|s| *s == Stage::Rem) {
                Some(r) => (sl, r as f64 * e / 60.0 - sl),
                None => (sl, dur - sl),
            }
        }
    };
    let nrem = |s: Stage| matches!(s, Stage::N2 | Stage::N3);
    let mut sorem_count = 0.0;
    let mut sorem_min = 0.0;
    let mut frag = 0.0;
    for i in 1..n {
        if st[i] == Stage::Rem && st[i - 1] != Stage::Rem && wake_like(st[i - 1]) && run_back(st, i - 1, wake_like, e) >= 150.0 {
            sorem_count += 1.0;
            let mut j = i;
            while j < n && st[j] == Stage::Rem {
                sorem_min += e / 60.0;
                j += 1;
            }
        }
        if wake_like(st[i]) && nrem(st[i - 1]) && run_back(st, i - 1, nrem, e) >= 90.0 {
            let mut j = i;
            let mut len = 0.0;
            while j < n && wake_like(st[j]) {
                len += e;
                j += 1;
            }
            if len >= 60.0 {
                frag += 1.0;
            }
        }
    }
    let mut long = 0.0;
    let mut short_min = 0.0;
    for i in 1..n {
        let starts = wake_like(st[i]) && !wake_like(st[i - 1]);
        if starts {
            let mut j = i;
            while j < n && wake_like(st[j]) {
                j += 1;
            }
            let secs = (j - i) as f64 * e;
            if secs >= 180.0 {
                long += 1.0;
            }
            if secs < 900.0 {
                short_min += secs / 60.0;
            }
        }
    }
    vec![rl, sl, sorem_count, sorem_min, frag, long, short_min]
}

pub fn oracle_transitions(hd: &Hypnodensity) -> Vec<f64> {
    let mut types = Vec::new();
    let mut masses = Vec::new();
    for p in &hd.probs {
        let m = [p[0] + p[1], p[2], p[3], p[4]];
        let mut t = 0;
        for k in 0..4 {
            if m[k] > m[t] {
                t = k;
            }
        }
        let mass = m[t] * f64::from(hd.resolution_s) / 30.0;
        if types.last() == Some(&t) {
            *masses.last_mut().unwrap() += mass;
        } else {
            types.push(t);
            masses.push(mass);
        }
    }
    let mut kt: Vec<usize> = Vec::new();
    let mut km: Vec<f64> = Vec::new();
    for (t, m) in types.into_iter().zip(masses) {
        if m < 10.0 {
            continue;
        }
        if kt.last() == Some(&t) {
            *km.last_mut().unwrap() += m;
        } else {
            kt.push(t);
            km.push(m);
        }
    }
    let order = [(0, 1), (0, 3), (1, 0), (1, 2), (1, 3), (2, 0), (2, 1), (3, 0), (3, 1)];
    let mut out = vec![0.0; 9];
    for i in 1..kt.len() {
        if let Some(j) = order.iter().position(|&o| o == (kt[i - 1], kt[i])) {
            out[j] += (km[i - 1] * km[i]).sqrt();
        }
    }
    out
}

pub fn oracle_vector(hd: &Hypnodensity, hyp: &HypnogramLabels) -> Vec<f64> {
    let mut out = Vec::new();
    for combo in oracle_combos() {
        let series: Vec<f64> = hd.probs.iter().map(|p| combo.iter().fold(1.0, |a, &k| a * p[k])).collect();
        out.extend(oracle_descriptors(&series, f64::from(hd.resolution_s)));
    }
    out.extend(oracle_sequencing(hyp));
    out.extend(oracle_transitions(hd));
    out
}
