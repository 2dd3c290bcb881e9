//! Static SVG plots, written directly with no plotting dependency: scatter,
//! bar chart, and multi-series line plot. Fixed canvas, monospace labels,
//! five-tick linear axes.

use harmonizer_core::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 64.0;
const COLORS: [&str; 4] = ["#4477aa", "#ee6677", "#228833", "#ccbb44"];

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn of(values: impl Iterator<Item = f64>) -> Axis {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Axis { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 {
            // Degenerate range: pad around the single value.
            return Axis { lo: lo - 0.5, hi: hi + 0.5 };
        }
        let pad = (hi - lo) * 0.05;
        Axis { lo: lo - pad, hi: hi + pad }
    }

    fn x(&self, v: f64) -> f64 {
        MARGIN + (v - self.lo) / (self.hi - self.lo) * (W - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        H - MARGIN - (v - self.lo) / (self.hi - self.lo) * (H - 2.0 * MARGIN)
    }

    fn ticks(&self) -> Vec<f64> {
        (0..=4)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / 4.0)
            .collect()
    }
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="28" font-family="monospace" font-size="15" text-anchor="middle">{title}</text>
"#,
        W / 2.0
    );
    s
}

fn axes(s: &mut String, xa: &Axis, ya: &Axis, x_label: &str, y_label: &str) {
    let x0 = MARGIN;
    let x1 = W - MARGIN;
    let y0 = H - MARGIN;
    let y1 = MARGIN;
    let _ = write!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>
<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>
<text x="{}" y="{}" font-family="monospace" font-size="13" text-anchor="middle">{x_label}</text>
<text x="18" y="{}" font-family="monospace" font-size="13" text-anchor="middle" transform="rotate(-90 18 {})">{y_label}</text>
"#,
        (x0 + x1) / 2.0,
        H - 16.0,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    for t in xa.ticks() {
        let x = xa.x(t);
        let _ = write!(
            s,
            r#"<line x1="{x}" y1="{y0}" x2="{x}" y2="{}" stroke="black"/>
<text x="{x}" y="{}" font-family="monospace" font-size="11" text-anchor="middle">{t:.3}</text>
"#,
            y0 + 5.0,
            y0 + 20.0
        );
    }
    for t in ya.ticks() {
        let y = ya.y(t);
        let _ = write!(
            s,
            r#"<line x1="{}" y1="{y}" x2="{x0}" y2="{y}" stroke="black"/>
<text x="{}" y="{}" font-family="monospace" font-size="11" text-anchor="end">{t:.3}</text>
"#,
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0
        );
    }
}

fn save(path: &Path, mut body: String) -> Result<()> {
    body.push_str("</svg>\n");
    std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Scatter plot of `(x, y)` points.
pub fn scatter_svg(
    path: &Path,
    points: &[(f64, f64)],
    title: &str,
    x_label: &str,
    y_label: &str,
) -> Result<()> {
    let xa = Axis::of(points.iter().map(|p| p.0));
    let ya = Axis::of(points.iter().map(|p| p.1));
    let mut s = open(title);
    axes(&mut s, &xa, &ya, x_label, y_label);
    for &(x, y) in points {
        let _ = write!(
            s,
            r#"<circle cx="{}" cy="{}" r="3.5" fill="{}" fill-opacity="0.7"/>
"#,
            xa.x(x),
            ya.y(y),
            COLORS[0]
        );
    }
    save(path, s)
}

/// Bar chart with one labeled bar per entry.
pub fn bar_svg(path: &Path, bars: &[(String, f64)], title: &str, y_label: &str) -> Result<()> {
    let ya = Axis::of(bars.iter().map(|b| b.1).chain(std::iter::once(0.0)));
    let mut s = open(title);
    let xa = Axis { lo: 0.0, hi: bars.len() as f64 };
    axes(&mut s, &xa, &ya, "", y_label);
    let slot = (W - 2.0 * MARGIN) / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = MARGIN + i as f64 * slot + slot * 0.15;
        let y = ya.y(*v);
        let base = ya.y(0.0f64.max(ya.lo));
        let (top, height) = if y <= base { (y, base - y) } else { (base, y - base) };
        let _ = write!(
            s,
            r#"<rect x="{x}" y="{top}" width="{}" height="{}" fill="{}"/>
<text x="{}" y="{}" font-family="monospace" font-size="12" text-anchor="middle">{label}</text>
"#,
            slot * 0.7,
            height,
            COLORS[i % COLORS.len()],
            x + slot * 0.35,
            H - MARGIN + 34.0
        );
    }
    save(path, s)
}

/// Multi-series line plot over a shared integer x-axis (bin index).
pub fn line_series_svg(
    path: &Path,
    series: &[(&str, &[f64])],
    title: &str,
    x_label: &str,
    y_label: &str,
) -> Result<()> {
    let max_len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1);
    let xa = Axis { lo: 0.0, hi: (max_len.max(2) - 1) as f64 };
    let ya = Axis::of(series.iter().flat_map(|(_, v)| v.iter().copied()));
    let mut s = open(title);
    axes(&mut s, &xa, &ya, x_label, y_label);
    for (i, (name, values)) in series.iter().enumerate() {
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(j, &v)| format!("{:.2},{:.2}", xa.x(j as f64), ya.y(v)))
            .collect();
        let color = COLORS[i % COLORS.len()];
        let _ = write!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>
<text x="{}" y="{}" font-family="monospace" font-size="12" fill="{color}">{name}</text>
"#,
            pts.join(" "),
            W - MARGIN - 140.0,
            MARGIN + 18.0 + 16.0 * i as f64
        );
    }
    save(path, s)
}
