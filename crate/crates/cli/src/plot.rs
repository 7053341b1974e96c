//! Stacked-area hypnodensity plots as SVG 1.1.

use std::fmt::Write;

use hypnos_core::hypnodensity::{Hypnodensity, N_STAGES};

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 340.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 70.0;

/// W white, N1 red, N2 light blue, N3 dark blue, REM black.
pub const STAGE_COLORS: [&str; N_STAGES] = ["#ffffff", "#ff0000", "#add8e6", "#00008b", "#000000"];
const STAGE_LABELS: [&str; N_STAGES] = ["W", "N1", "N2", "N3", "REM"];
const TICK_STEPS_H: [f64; 6] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Stages stack from the top in W, N1, N2, N3, REM order; x is in hours.
pub fn render_svg(hd: &Hypnodensity) -> String {
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let duration = hd.duration_s().max(f64::from(hd.resolution_s));
    let x = |t: f64| LEFT + t / duration * plot_w;
    let y = |p: f64| TOP + p.clamp(0.0, 1.0) * plot_h;
    let res = f64::from(hd.resolution_s);

    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(out, "<title>{}</title>", escape(&hd.recording_id));
    let _ = writeln!(out, "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#f4f4f4\"/>");

    let mut upper = vec![0.0; hd.len()];
    for (k, color) in STAGE_COLORS.iter().enumerate() {
        let lower: Vec<f64> = upper.iter().zip(&hd.probs).map(|(u, p)| u + p[k]).collect();
        let mut d = String::new();
        for (i, u) in upper.iter().enumerate() {
            let cmd = if i == 0 { 'M' } else { 'L' };
            let (t0, t1) = (i as f64 * res, (i + 1) as f64 * res);
            let _ = write!(d, "{cmd}{:.2} {:.2} L{:.2} {:.2} ", x(t0), y(*u), x(t1), y(*u));
        }
        for (i, l) in lower.iter().enumerate().rev() {
            let (t0, t1) = (i as f64 * res, (i + 1) as f64 * res);
            let _ = write!(d, "L{:.2} {:.2} L{:.2} {:.2} ", x(t1), y(*l), x(t0), y(*l));
        }
        d.push('Z');
        let _ = writeln!(out, "<path d=\"{d}\" fill=\"{color}\" stroke=\"none\"/>");
        upper = lower;
    }

    let _ = writeln!(
        out,
        "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" stroke=\"#000000\" stroke-width=\"1\"/>"
    );
    let hours = duration / 3600.0;
    let step = TICK_STEPS_H.iter().copied().find(|s| hours / s <= 12.0).unwrap_or(16.0);
    let axis_y = TOP + plot_h;
    let mut h = 0.0;
    while h <= hours + 1e-9 {
        let tx = x(h * 3600.0);
        let _ = writeln!(out, "<line x1=\"{tx:.2}\" y1=\"{axis_y}\" x2=\"{tx:.2}\" y2=\"{:.2}\" stroke=\"#000000\"/>", axis_y + 5.0);
        let _ = writeln!(
            out,
            "<text x=\"{tx:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{h}</text>",
            axis_y + 18.0
        );
        h += step;
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">Time (h)</text>",
        LEFT + plot_w / 2.0,
        axis_y + 34.0
    );
    for (k, (label, color)) in STAGE_LABELS.iter().zip(STAGE_COLORS).enumerate() {
        let lx = LEFT + k as f64 * 70.0;
        let ly = HEIGHT - 18.0;
        let _ = writeln!(
            out,
            "<rect x=\"{lx:.2}\" y=\"{:.2}\" width=\"12\" height=\"12\" fill=\"{color}\" stroke=\"#000000\"/>",
            ly - 10.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{ly:.2}\" font-family=\"sans-serif\" font-size=\"12\">{label}</text>",
            lx + 16.0
        );
    }
    out.push_str("</svg>\n");
    out
}
