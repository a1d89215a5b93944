//! Minimal deterministic SVG line charts with optional shaded bands.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::CliError;

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Lower and upper envelope at each point.
    pub band: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChartStyle {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn value(&self, v: f64) -> f64 {
        if self.log {
            v.log10()
        } else {
            v
        }
    }

    fn fraction(&self, v: f64) -> f64 {
        (self.value(v) - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            return (self.lo as i32..=self.hi as i32).map(|e| 10f64.powi(e)).collect();
        }
        let raw = (self.hi - self.lo) / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
        let first = (self.lo / step).ceil() as i64;
        let last = (self.hi / step).floor() as i64;
        (first..=last).map(|i| i as f64 * step).collect()
    }

    fn label(&self, v: f64) -> String {
        if self.log {
            format!("1e{}", v.log10().round() as i32)
        } else {
            format!("{v}")
        }
    }
}

fn axis(values: impl Iterator<Item = f64>, log: bool) -> Option<Axis> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        let t = if log { v.log10() } else { v };
        lo = lo.min(t);
        hi = hi.max(t);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return None;
    }
    if log {
        lo = lo.floor();
        hi = hi.ceil();
        if hi <= lo {
            hi = lo + 1.0;
        }
    } else if hi - lo < 1e-12 * lo.abs().max(1.0) {
        lo -= 0.5;
        hi += 0.5;
    }
    Some(Axis { lo, hi, log })
}

/// Renders `series` to an SVG string, or `None` when there is nothing to draw.
/// On a log axis non-positive values are dropped and band floors are
/// clamped to the smallest positive value in the chart.
pub fn render_svg(series: &[Series], style: &ChartStyle) -> Option<String> {
    let keep = |y: f64| y.is_finite() && (!style.log_y || y > 0.0);
    let visible: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).filter(|p| keep(p.1) && p.0.is_finite()).collect();
    if visible.is_empty() {
        return None;
    }
    let floor = visible.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let clamp = |y: f64| if style.log_y && y <= 0.0 { floor } else { y };
    let band_values = series
        .iter()
        .filter_map(|s| s.band.as_ref())
        .flat_map(|b| b.iter().flat_map(|&(lo, hi)| [clamp(lo), clamp(hi)]))
        .filter(|&y| keep(y));
    let xa = axis(visible.iter().map(|p| p.0), false)?;
    let ya = axis(visible.iter().map(|p| p.1).chain(band_values), style.log_y)?;
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let px = |x: f64| LEFT + xa.fraction(x) * pw;
    let py = |y: f64| TOP + (1.0 - ya.fraction(y)) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, escape(&style.title));
    for t in xa.ticks() {
        let x = px(t);
        let _ = writeln!(out, r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#e6e6e6"/>"##, TOP + ph);
        let _ = writeln!(out, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, TOP + ph + 16.0, xa.label(t));
    }
    for t in ya.ticks() {
        let y = py(t);
        let _ = writeln!(out, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e6e6e6"/>"##, LEFT + pw);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, ya.label(t));
    }
    let _ = writeln!(out, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 14.0, escape(&style.x_label));
    let _ = writeln!(
        out,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&style.y_label)
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some(band) = &s.band {
            let pairs: Vec<(f64, (f64, f64))> = s
                .points
                .iter()
                .zip(band)
                .map(|(p, &(lo, hi))| (p.0, (clamp(lo), clamp(hi))))
                .filter(|(x, (lo, hi))| x.is_finite() && keep(*lo) && keep(*hi))
                .collect();
            if !pairs.is_empty() {
                let upper = pairs.iter().map(|(x, (_, hi))| format!("{:.2},{:.2}", px(*x), py(*hi)));
                let lower = pairs.iter().rev().map(|(x, (lo, _))| format!("{:.2},{:.2}", px(*x), py(*lo)));
                let pts: Vec<String> = upper.chain(lower).collect();
                let _ = writeln!(out, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, pts.join(" "));
            }
        }
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && keep(p.1))
            .map(|&(x, y)| format!("{:.2} {:.2}", px(x), py(y)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(out, r#"<path d="M {}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" L "));
        }
        let ly = TOP + 14.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(out, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&s.label));
    }
    out.push_str("</svg>\n");
    Some(out)
}

/// Writes the chart and returns `true`, or logs a warning and writes
/// nothing when no series has a drawable point.
pub fn emit_svg(path: &Path, series: &[Series], style: &ChartStyle) -> Result<bool, CliError> {
    match render_svg(series, style) {
        Some(svg) => {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, svg)?;
            Ok(true)
        }
        None => {
            log::warn!("no drawable data for {}; figure skipped", path.display());
            Ok(false)
        }
    }
}
