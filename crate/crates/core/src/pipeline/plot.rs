//! Minimal deterministic SVG bar and line charts.

use std::fmt::Write;

const W: f64 = 760.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 90.0;
const PALETTE: [&str; 8] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Axis range covering the data and zero, padded to a round step.
fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64, f64) {
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    ((lo / step).floor() * step, (hi / step).ceil() * step, step)
}

struct Frame {
    lo: f64,
    hi: f64,
}

impl Frame {
    fn y(&self, v: f64) -> f64 {
        let plot_h = H - TOP - BOTTOM;
        TOP + plot_h * (1.0 - (v - self.lo) / (self.hi - self.lo))
    }
}

fn header(out: &mut String, title: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        (W - RIGHT + LEFT) / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + (H - TOP - BOTTOM) / 2.0,
        escape(y_label)
    );
}

fn axes(out: &mut String, f: &Frame, step: f64) {
    let x1 = W - RIGHT;
    let mut v = f.lo;
    while v <= f.hi + step * 1e-6 {
        let y = f.y(v);
        let _ = writeln!(out, r##"<line x1="{LEFT}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="#e0e0e0"/>"##);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, tick(v));
        v += step;
    }
    let y0 = f.y(0.0);
    let _ = writeln!(out, r#"<line x1="{LEFT}" y1="{y0:.1}" x2="{x1}" y2="{y0:.1}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.1}" stroke="black"/>"#, H - BOTTOM);
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn legend(out: &mut String, names: &[&str]) {
    let x = W - RIGHT + 16.0;
    for (i, n) in names.iter().enumerate() {
        let y = TOP + 18.0 * i as f64;
        let _ = writeln!(out, r#"<rect x="{x}" y="{y:.1}" width="12" height="12" fill="{}"/>"#, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, x + 18.0, y + 10.0, escape(n));
    }
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_chart(title: &str, x_label: &str, y_label: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let (lo, hi, step) = y_range(series.iter().flat_map(|(_, v)| v.iter().copied()));
    let f = Frame { lo, hi };
    let mut out = String::new();
    header(&mut out, title, y_label);
    axes(&mut out, &f, step);
    let plot_w = W - LEFT - RIGHT;
    let group = plot_w / categories.len().max(1) as f64;
    let bar = (group * 0.8) / series.len().max(1) as f64;
    for (ci, cat) in categories.iter().enumerate() {
        let gx = LEFT + group * ci as f64 + group * 0.1;
        for (si, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(ci).copied().unwrap_or(0.0);
            let (y0, y1) = (f.y(0.0), f.y(v));
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                gx + bar * si as f64,
                y0.min(y1),
                bar.max(0.5),
                (y1 - y0).abs(),
                PALETTE[si % PALETTE.len()]
            );
        }
        let cx = LEFT + group * (ci as f64 + 0.5);
        let _ = writeln!(
            out,
            r#"<text transform="translate({cx:.1} {:.1}) rotate(-30)" text-anchor="end">{}</text>"#,
            H - BOTTOM + 14.0,
            escape(cat)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        H - 8.0,
        escape(x_label)
    );
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// One polyline per series over its own index range.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<f64>)]) -> String {
    let (lo, hi, step) = y_range(series.iter().flat_map(|(_, v)| v.iter().copied()));
    let f = Frame { lo, hi };
    let mut out = String::new();
    header(&mut out, title, y_label);
    axes(&mut out, &f, step);
    let plot_w = W - LEFT - RIGHT;
    for (si, (_, vals)) in series.iter().enumerate() {
        let n = vals.len();
        let x = |i: usize| {
            if n <= 1 {
                LEFT + plot_w / 2.0
            } else {
                LEFT + plot_w * i as f64 / (n - 1) as f64
            }
        };
        let pts: Vec<String> = vals.iter().enumerate().map(|(i, &v)| format!("{:.1},{:.1}", x(i), f.y(v))).collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            pts.join(" "),
            PALETTE[si % PALETTE.len()]
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        H - BOTTOM + 30.0,
        escape(x_label)
    );
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_include_zero_and_round_out() {
        let (lo, hi, step) = y_range([3.2, 47.0].into_iter());
        assert_eq!((lo, hi, step), (0.0, 50.0, 10.0));
        let (lo, hi, _) = y_range([-12.0, 5.0].into_iter());
        assert!(lo <= -12.0 && hi >= 5.0);
    }

    #[test]
    fn charts_are_well_formed_and_escaped() {
        let s = bar_chart("a<b", "x", "y", &["c1".into()], &[("s&1".into(), vec![2.0])]);
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert!(s.contains("a&lt;b") && s.contains("s&amp;1"));
        let l = line_chart("t", "x", "y", &[("a".into(), vec![-0.5, 0.0, 0.25])]);
        assert_eq!(l.matches("<polyline").count(), 1);
    }
}
