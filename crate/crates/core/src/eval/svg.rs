//! Minimal self-contained SVG line plots.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Left edge of log-scaled x axes; smaller x values are clamped onto it.
pub const LOG_X_FLOOR: f64 = 1e-6;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 170.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 55.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
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
    fn fraction(&self, v: f64) -> f64 {
        if self.log {
            let v = v.max(self.lo);
            (v.log10() - self.lo.log10()) / (self.hi.log10() - self.lo.log10())
        } else if self.hi > self.lo {
            (v - self.lo) / (self.hi - self.lo)
        } else {
            0.5
        }
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let mut t = Vec::new();
            let mut e = self.lo.log10().floor() as i32;
            while 10f64.powi(e) <= self.hi * 1.000001 {
                t.push(10f64.powi(e));
                e += 1;
            }
            t
        } else {
            (0..=5)
                .map(|i| self.lo + (self.hi - self.lo) * i as f64 / 5.0)
                .collect()
        }
    }
}

fn label(v: f64, log: bool) -> String {
    if log {
        format!("1e{}", v.log10().round() as i32)
    } else if v.fract() == 0.0 && v.abs() < 1e6 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Renders series as polylines with axes, ticks and a legend. With `log_x`
/// the x axis spans `[1e-6, max x]` in log scale and zeros sit on its left edge.
pub fn render_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], log_x: bool) -> Result<String> {
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err(Error::contract("cannot plot an empty series"));
    }
    let all = || series.iter().flat_map(|s| s.points.iter());
    if all().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::contract("cannot plot non-finite values"));
    }
    let x_max = all().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let x_min = all().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let y_max = all().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let x_axis = if log_x {
        Axis {
            lo: LOG_X_FLOOR,
            hi: x_max.max(LOG_X_FLOOR * 10.0),
            log: true,
        }
    } else {
        Axis {
            lo: x_min.min(0.0),
            hi: x_max,
            log: false,
        }
    };
    let y_axis = Axis {
        lo: 0.0,
        hi: y_max.max(1.0),
        log: false,
    };
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let px = |x: f64| MARGIN_LEFT + x_axis.fraction(x) * plot_w;
    let py = |y: f64| MARGIN_TOP + (1.0 - y_axis.fraction(y)) * plot_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        escape(title)
    );
    let (x0, x1, y0, y1) = (MARGIN_LEFT, MARGIN_LEFT + plot_w, MARGIN_TOP + plot_h, MARGIN_TOP);
    let _ = writeln!(
        out,
        r#"<path d="M{x0:.2},{y1:.2} L{x0:.2},{y0:.2} L{x1:.2},{y0:.2}" fill="none" stroke="black"/>"#
    );
    for t in x_axis.ticks() {
        let x = px(t);
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            y0 + 5.0,
            y0 + 18.0,
            label(t, x_axis.log)
        );
    }
    for t in y_axis.ticks() {
        let y = py(t);
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{x0:.2}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0,
            label(t, false)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let ly = MARGIN_TOP + 14.0 * i as f64 + 6.0;
        let lx = x1 + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbers(svg: &str) -> Vec<f64> {
        svg.split(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-' || c == 'e'))
            .filter_map(|t| t.parse::<f64>().ok())
            .collect()
    }

    #[test]
    fn log_axis_clamps_zero_fpr() {
        let s = Series {
            name: "h1".into(),
            points: vec![(0.0, 0.0), (1e-4, 0.6), (1.0, 1.0)],
        };
        let svg = render_svg("ROC <low FPR>", "fpr", "tpr", &[s], true).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("&lt;low FPR&gt;"));
        assert!(numbers(&svg).iter().all(|v| v.is_finite()));
        let poly = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        // The zero-FPR point lands on the left edge of the plot area.
        assert!(poly.contains(&format!("points=\"{MARGIN_LEFT:.2},")));
        assert!(svg.contains(">1e-6<"));
    }

    #[test]
    fn rejects_non_finite() {
        let s = Series {
            name: "bad".into(),
            points: vec![(f64::NAN, 0.0)],
        };
        assert!(render_svg("t", "x", "y", &[s], false).is_err());
    }
}
