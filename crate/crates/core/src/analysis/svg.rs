//! Minimal standalone SVG bar and line charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    out: String,
    lo: f64,
    hi: f64,
}

impl Frame {
    fn new(title: &str, y_label: &str, values: &[f64]) -> Frame {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let (mut lo, mut hi) = finite
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        lo = lo.min(0.0);
        if hi <= lo {
            hi = lo + 1.0;
        }
        hi += (hi - lo) * 0.05;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            W / 2.0,
            escape(title)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(y_label)
        );
        let mut f = Frame { out, lo, hi };
        f.axes();
        f
    }

    fn y(&self, v: f64) -> f64 {
        TOP + (H - TOP - BOTTOM) * (1.0 - (v - self.lo) / (self.hi - self.lo))
    }

    fn axes(&mut self) {
        let (x0, y0, y1) = (LEFT, H - BOTTOM, TOP);
        let _ = writeln!(self.out, r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#, W - RIGHT);
        let _ = writeln!(self.out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
        for i in 0..=4 {
            let v = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
            let y = self.y(v);
            let _ = writeln!(
                self.out,
                r#"<line x1="{}" y1="{y:.1}" x2="{x0}" y2="{y:.1}" stroke="black"/><text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
                x0 - 4.0,
                x0 - 6.0,
                y + 4.0
            );
        }
    }

    fn x_label(&mut self, x: f64, label: &str) {
        let _ = writeln!(
            self.out,
            r#"<text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 18.0,
            escape(label)
        );
    }

    fn finish(mut self, x_title: &str) -> String {
        let _ = writeln!(
            self.out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (LEFT + W - RIGHT) / 2.0,
            H - 14.0,
            escape(x_title)
        );
        self.out.push_str("</svg>\n");
        self.out
    }
}

pub fn bar_chart(title: &str, x_title: &str, y_label: &str, labels: &[String], values: &[f64]) -> String {
    let mut f = Frame::new(title, y_label, values);
    let slot = (W - LEFT - RIGHT) / labels.len().max(1) as f64;
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let x = LEFT + slot * i as f64;
        let (top, base) = (f.y(if v.is_finite() { v } else { f.lo }), f.y(f.lo.max(0.0)));
        let _ = writeln!(
            f.out,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#4c72b0"/>"##,
            x + slot * 0.15,
            top.min(base),
            slot * 0.7,
            (base - top).abs()
        );
        let _ = writeln!(
            f.out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.3}</text>"#,
            x + slot / 2.0,
            top.min(base) - 4.0
        );
        f.x_label(x + slot / 2.0, label);
    }
    f.finish(x_title)
}

/// Points are placed at evenly spaced x positions labelled by `labels`.
pub fn line_chart(title: &str, x_title: &str, y_label: &str, labels: &[String], values: &[f64]) -> String {
    let mut f = Frame::new(title, y_label, values);
    let slot = (W - LEFT - RIGHT) / labels.len().max(1) as f64;
    let pts: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| (LEFT + slot * (i as f64 + 0.5), f.y(v)))
        .collect();
    let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
    let _ = writeln!(
        f.out,
        r##"<polyline points="{}" fill="none" stroke="#c44e52" stroke-width="2"/>"##,
        path.join(" ")
    );
    for ((x, y), (label, v)) in pts.iter().zip(labels.iter().zip(values)) {
        let _ = writeln!(f.out, r##"<circle cx="{x:.1}" cy="{y:.1}" r="4" fill="#c44e52"/>"##);
        let _ = writeln!(f.out, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{v:.3}</text>"#, y - 8.0);
        f.x_label(*x, label);
    }
    f.finish(x_title)
}

/// Grayscale heatmap of a row-major `n × n` matrix with values in [0, 1]; darker is larger.
pub fn heatmap(title: &str, n: usize, values: &[f64]) -> String {
    let size = 512.0;
    let cell = size / n.max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12">"#,
        size + 40.0,
        size + 60.0
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="20" y="22" font-size="14">{}</text>"#, escape(title));
    let max = values.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max).max(1e-12);
    for q in 0..n {
        for k in 0..n {
            let v = values[q * n + k];
            if v <= 0.0 || !v.is_finite() {
                continue;
            }
            let shade = (255.0 * (1.0 - (v / max).sqrt())).round() as u8;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({shade},{shade},{shade})"/>"#,
                20.0 + k as f64 * cell,
                40.0 + q as f64 * cell,
                cell,
                cell
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<rect x="20" y="40" width="{size}" height="{size}" fill="none" stroke="black"/>"#
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let labels = vec!["a<b".to_string(), "c".to_string()];
        for svg in [
            bar_chart("t", "x", "y", &labels, &[1.0, 2.5]),
            line_chart("t", "x", "y", &labels, &[1.0, f64::NAN]),
        ] {
            assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
            assert!(svg.contains("a&lt;b"));
            assert_eq!(svg.matches("<svg").count(), 1);
        }
        let h = heatmap("attn", 2, &[1.0, 0.0, 0.5, 0.5]);
        assert_eq!(h.matches("<rect").count(), 2 + 3);
    }
}
