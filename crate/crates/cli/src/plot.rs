//! Static SVG accuracy-vs-compression plots.

use std::fmt::Write;

use glt_core::pruning::RunRecord;

use crate::error::{Error, Result};

pub struct Curve {
    pub label: String,
    /// `(compression_ratio, test_accuracy)` in file order.
    pub points: Vec<(f64, f64)>,
}

impl Curve {
    pub fn from_records(label: impl Into<String>, records: &[RunRecord]) -> Self {
        Self {
            label: label.into(),
            points: records.iter().map(|r| (r.compression_ratio, r.test_accuracy)).collect(),
        }
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn px(x: f64) -> f64 {
    LEFT + x.clamp(0.0, 1.0) * (WIDTH - LEFT - RIGHT)
}

fn py(y: f64) -> f64 {
    HEIGHT - BOTTOM - y.clamp(0.0, 1.0) * (HEIGHT - TOP - BOTTOM)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders the curves on fixed `[0, 1] × [0, 1]` axes. The output depends
/// only on the inputs.
pub fn render(curves: &[Curve]) -> Result<String> {
    if curves.is_empty() {
        return Err(Error::Usage("plot needs at least one curve".into()));
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#dddddd"/>"##,
            px(0.0),
            py(v),
            px(1.0),
            py(v)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"#,
            px(0.0) - 6.0,
            py(v) + 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.2}</text>"#,
            px(v),
            py(0.0) + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        px(0.0),
        py(1.0),
        px(1.0) - px(0.0),
        py(0.0) - py(1.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">compression ratio</text>"#,
        (px(0.0) + px(1.0)) / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">test accuracy</text>"#,
        (py(0.0) + py(1.0)) / 2.0
    );

    for (k, curve) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if curve.points.len() >= 2 {
            let pts: Vec<String> = curve.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                pts.join(" ")
            );
        }
        for &(x, y) in &curve.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = TOP + 16.0 * k as f64 + 8.0;
        let lx = WIDTH - RIGHT + 16.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 24.0,
            ly + 4.0,
            escape(&curve.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(label: &str, points: &[(f64, f64)]) -> Curve {
        Curve {
            label: label.into(),
            points: points.to_vec(),
        }
    }

    #[test]
    fn empty_input_is_a_usage_error() {
        assert!(matches!(render(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn single_point_has_a_marker_and_no_polyline() {
        let svg = render(&[curve("one", &[(0.5, 0.5)])]).unwrap();
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(!svg.contains("<polyline"));
    }

    #[test]
    fn one_polyline_per_curve() {
        let svg = render(&[curve("imp", &[(0.0, 0.9), (0.2, 0.88), (0.5, 0.7)]), curve("a<b", &[(0.0, 0.9), (0.9, 0.1)])]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 5);
        assert!(svg.contains(">a&lt;b</text>"));
        assert!(svg.contains(">imp</text>"));
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn output_is_deterministic_and_axes_are_fixed() {
        let c = || vec![curve("x", &[(0.0, 1.0), (1.0, 0.0)])];
        assert_eq!(render(&c()).unwrap(), render(&c()).unwrap());
        let svg = render(&c()).unwrap();
        let first = format!("{:.2},{:.2} {:.2},{:.2}", px(0.0), py(1.0), px(1.0), py(0.0));
        assert!(svg.contains(&first));
    }
}
