//! Minimal SVG line and bar charts. Output is a pure function of the input,
//! with no timestamps, so identical data give identical files.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Fixed y range; `None` fits the data.
    pub y_range: Option<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-300);
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|f| f * mag).find(|s| span / s <= target as f64).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn bounds(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.filter(|v| v.is_finite()).fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

fn pad((lo, hi): (f64, f64)) -> (f64, f64) {
    if hi > lo {
        let p = 0.05 * (hi - lo);
        (lo - p, hi + p)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }
}

fn header(out: &mut String, chart: &Chart) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (W - RIGHT + LEFT) / 2.0, esc(&chart.title));
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (W - RIGHT + LEFT) / 2.0, H - 15.0, esc(&chart.x_label));
    let _ = writeln!(
        out,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        (H - BOTTOM + TOP) / 2.0,
        esc(&chart.y_label)
    );
}

fn axes(out: &mut String, f: &Frame, x_ticks: &[(f64, String)]) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(out, r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y1 - y0);
    for v in nice_ticks(f.y.0, f.y.1, 6) {
        let y = f.py(v);
        let _ = writeln!(out, r##"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#dddddd"/>"##);
        let _ = writeln!(out, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 6.0, y + 4.0, fmt_tick(v));
    }
    for (v, label) in x_ticks {
        let x = f.px(*v);
        let _ = writeln!(out, r#"<line x1="{x:.2}" y1="{y1}" x2="{x:.2}" y2="{}" stroke="black"/>"#, y1 + 5.0);
        let _ = writeln!(out, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, y1 + 18.0, esc(label));
    }
}

fn legend(out: &mut String, labels: &[&str]) {
    let x = W - RIGHT + 15.0;
    for (i, label) in labels.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(out, r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{c}" stroke-width="2"/>"#, x + 20.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, x + 26.0, y + 4.0, esc(label));
    }
}

/// Line chart with markers; x ticks at the distinct x values when there are
/// few of them.
pub fn line_chart(chart: &Chart, series: &[Series]) -> String {
    let xb = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0))).unwrap_or((0.0, 1.0));
    let yb = chart.y_range.unwrap_or_else(|| pad(bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1))).unwrap_or((0.0, 1.0))));
    let f = Frame { x: pad(xb), y: yb };

    let mut xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).filter(|v| v.is_finite()).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let ticks: Vec<(f64, String)> = if xs.len() <= 12 {
        xs.iter().map(|&v| (v, fmt_tick(v))).collect()
    } else {
        nice_ticks(xb.0, xb.1, 8).into_iter().map(|v| (v, fmt_tick(v))).collect()
    };

    let mut out = String::new();
    header(&mut out, chart);
    axes(&mut out, &f, &ticks);
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, pts.join(" "));
        for p in &pts {
            let (x, y) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="3" fill="{c}"/>"#);
        }
    }
    legend(&mut out, &series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// One bar per `(label, value)`.
pub fn bar_chart(chart: &Chart, bars: &[(String, f64)]) -> String {
    let n = bars.len().max(1) as f64;
    let top = bounds(bars.iter().map(|b| b.1)).map_or(1.0, |(_, hi)| hi.max(0.0));
    let yb = chart.y_range.unwrap_or((0.0, if top > 0.0 { top * 1.1 } else { 1.0 }));
    let f = Frame { x: (0.0, n), y: yb };
    let ticks: Vec<(f64, String)> = bars.iter().enumerate().map(|(i, b)| (i as f64 + 0.5, b.0.clone())).collect();

    let mut out = String::new();
    header(&mut out, chart);
    axes(&mut out, &f, &ticks);
    let width = 0.6 * (W - LEFT - RIGHT) / n;
    for (i, (_, v)) in bars.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let v = if v.is_finite() { *v } else { 0.0 };
        let (x, y, base) = (f.px(i as f64 + 0.5) - width / 2.0, f.py(v), f.py(yb.0.max(0.0)));
        let _ = writeln!(out, r#"<rect x="{x:.2}" y="{:.2}" width="{width:.2}" height="{:.2}" fill="{c}"/>"#, y.min(base), (base - y).abs());
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, x + width / 2.0, y.min(base) - 4.0, fmt_tick(v));
    }
    legend(&mut out, &bars.iter().map(|b| b.0.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}
