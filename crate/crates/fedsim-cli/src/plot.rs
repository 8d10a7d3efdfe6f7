//! Standalone SVG rendering for run summaries and skew sweeps.
//!
//! No external assets: every plot is one self-contained SVG document with
//! inline styling. Loss curves use a log-scale vertical axis (values floored
//! at 1e-12 so noiseless runs stay plottable); the skew scatter draws one
//! marker per point plus a zero reference line.

use std::collections::BTreeMap;
use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;
const LOG_FLOOR: f64 = 1e-12;

const SERIES_COLORS: [&str; 4] = ["#1f77b4", "#2ca02c", "#ff7f0e", "#d62728"];

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(f64::MIN_POSITIVE);
        MARGIN_L + (v - self.x_min) / span * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn y(&self, v: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(f64::MIN_POSITIVE);
        HEIGHT - MARGIN_B - (v - self.y_min) / span * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn open_svg(title: &str) -> String {
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#555\"/>",
        WIDTH - MARGIN_L - MARGIN_R,
        HEIGHT - MARGIN_T - MARGIN_B
    );
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn axis_label(s: &mut String, x_label: &str, y_label: &str) {
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        escape(y_label)
    );
}

fn linear_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n)
        .map(|i| lo + (hi - lo) * i as f64 / n as f64)
        .collect()
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 0.01 && v.abs() < 10_000.0 {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

/// Per-rule mean loss across seeds, round by round, on a log vertical axis.
pub fn loss_curves(
    series: &BTreeMap<String, BTreeMap<usize, (f64, usize)>>,
    title: &str,
) -> String {
    let mut x_max = 1.0_f64;
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for per_round in series.values() {
        for (&round, &(sum, count)) in per_round {
            let mean = (sum / count as f64).max(LOG_FLOOR).log10();
            x_max = x_max.max(round as f64);
            y_lo = y_lo.min(mean);
            y_hi = y_hi.max(mean);
        }
    }
    if y_lo == y_hi {
        y_lo -= 0.5;
        y_hi += 0.5;
    }
    let frame = Frame {
        x_min: 0.0,
        x_max,
        y_min: y_lo,
        y_max: y_hi,
    };
    let mut svg = open_svg(title);
    for tick in linear_ticks(0.0, x_max, 5) {
        let x = frame.x(tick);
        let _ = writeln!(
            svg,
            "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"#ccc\"/>",
            HEIGHT - MARGIN_B,
            HEIGHT - MARGIN_B + 4.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            HEIGHT - MARGIN_B + 18.0,
            fmt_tick(tick)
        );
    }
    let lo_decade = y_lo.floor() as i64;
    let hi_decade = y_hi.ceil() as i64;
    for d in lo_decade..=hi_decade {
        let v = d as f64;
        if v < frame.y_min || v > frame.y_max {
            continue;
        }
        let y = frame.y(v);
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#eee\"/>",
            MARGIN_L,
            WIDTH - MARGIN_R
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">1e{d}</text>",
            MARGIN_L - 6.0,
            y + 4.0
        );
    }
    for (k, (rule, per_round)) in series.iter().enumerate() {
        let color = SERIES_COLORS[k % SERIES_COLORS.len()];
        let points: Vec<String> = per_round
            .iter()
            .map(|(&round, &(sum, count))| {
                let mean = (sum / count as f64).max(LOG_FLOOR).log10();
                format!("{:.2},{:.2}", frame.x(round as f64), frame.y(mean))
            })
            .collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>",
            points.join(" ")
        );
        // legend
        let ly = MARGIN_T + 16.0 + 18.0 * k as f64;
        let _ = writeln!(
            svg,
            "<g class=\"legend\"><line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\">{}</text></g>",
            WIDTH - MARGIN_R - 150.0,
            WIDTH - MARGIN_R - 120.0,
            WIDTH - MARGIN_R - 112.0,
            ly + 4.0,
            escape(rule)
        );
    }
    axis_label(&mut svg, "communication round", "objective (log scale)");
    svg.push_str("</svg>\n");
    svg
}

/// Weighted-minus-agnostic final loss against participation skew, one
/// marker per point, with a zero reference line.
pub fn skew_scatter(points: &[(f64, f64)], title: &str) -> String {
    let mut x_lo = f64::INFINITY;
    let mut x_hi = f64::NEG_INFINITY;
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for &(x, y) in points {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    y_lo = y_lo.min(0.0);
    y_hi = y_hi.max(0.0);
    if x_lo == x_hi {
        x_lo -= 0.5;
        x_hi += 0.5;
    }
    if y_lo == y_hi {
        y_lo -= 0.5;
        y_hi += 0.5;
    }
    let pad_x = 0.05 * (x_hi - x_lo);
    let pad_y = 0.05 * (y_hi - y_lo);
    let frame = Frame {
        x_min: x_lo - pad_x,
        x_max: x_hi + pad_x,
        y_min: y_lo - pad_y,
        y_max: y_hi + pad_y,
    };
    let mut svg = open_svg(title);
    for tick in linear_ticks(frame.x_min, frame.x_max, 5) {
        let x = frame.x(tick);
        let _ = writeln!(
            svg,
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            HEIGHT - MARGIN_B + 18.0,
            fmt_tick(tick)
        );
    }
    for tick in linear_ticks(frame.y_min, frame.y_max, 5) {
        let y = frame.y(tick);
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            MARGIN_L - 6.0,
            y + 4.0,
            fmt_tick(tick)
        );
    }
    let zero_y = frame.y(0.0);
    let _ = writeln!(
        svg,
        "<line class=\"zero\" x1=\"{}\" y1=\"{zero_y}\" x2=\"{}\" y2=\"{zero_y}\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>",
        MARGIN_L,
        WIDTH - MARGIN_R
    );
    for &(x, y) in points {
        let _ = writeln!(
            svg,
            "<circle class=\"pt\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"#1f77b4\" fill-opacity=\"0.75\"/>",
            frame.x(x),
            frame.y(y)
        );
    }
    axis_label(
        &mut svg,
        "participation skew ||p - (1/N)1||_1",
        "final loss difference (weighted - agnostic)",
    );
    svg.push_str("</svg>\n");
    svg
}
