//! Static SVG charts for sweep and training outputs.
//!
//! Plots are conveniences derived from the CSV files; they are written as
//! plain SVG text with no external renderer.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    /// `(x, y, error bar half-width)`.
    pub points: Vec<(f64, f64, f64)>,
    /// `(slope, intercept)` of a straight line in plotted coordinates
    /// (base-10 logs on log axes).
    pub fit: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
    pub note: Option<String>,
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = values
            .filter(|v| v.is_finite() && (!log || *v > 0.0))
            .map(|v| if log { v.log10() } else { v })
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if log {
            lo = lo.floor();
            hi = hi.ceil().max(lo + 1.0);
        } else if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        Self { lo, hi, log }
    }

    fn frac(&self, v: f64) -> Option<f64> {
        let v = if self.log {
            if v <= 0.0 {
                return None;
            }
            v.log10()
        } else {
            v
        };
        Some((v - self.lo) / (self.hi - self.lo))
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            (self.lo as i32..=self.hi as i32)
                .map(|k| ((k as f64 - self.lo) / (self.hi - self.lo), format!("1e{k}")))
                .collect()
        } else {
            (0..=4)
                .map(|i| {
                    let f = i as f64 / 4.0;
                    (f, format!("{:.3}", self.lo + f * (self.hi - self.lo)))
                })
                .collect()
        }
    }
}

impl Chart {
    pub fn to_svg(&self) -> String {
        let pts = || self.series.iter().flat_map(|s| s.points.iter());
        let xa = Axis::new(pts().map(|p| p.0), self.log_x);
        let ya = Axis::new(pts().flat_map(|p| [p.1 - p.2, p.1 + p.2, p.1]), self.log_y);
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let px = |f: f64| LEFT + f * pw;
        let py = |f: f64| TOP + (1.0 - f) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for (f, label) in xa.ticks() {
            let x = px(f);
            let _ = writeln!(
                s,
                r##"<line x1="{x:.1}" y1="{TOP}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{label}</text>"##,
                TOP + ph,
                TOP + ph + 16.0
            );
        }
        for (f, label) in ya.ticks() {
            let y = py(f);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{label}</text>"##,
                LEFT + pw,
                LEFT - 6.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            H - 14.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );

        for (i, series) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let mut path = Vec::new();
            for &(x, y, e) in &series.points {
                let (Some(fx), Some(fy)) = (xa.frac(x), ya.frac(y)) else {
                    continue;
                };
                let (cx, cy) = (px(fx), py(fy));
                path.push(format!("{cx:.1},{cy:.1}"));
                let _ = writeln!(s, r#"<circle cx="{cx:.1}" cy="{cy:.1}" r="3" fill="{color}"/>"#);
                if e > 0.0 {
                    if let (Some(lo), Some(hi)) = (ya.frac(y - e).or(Some(0.0)), ya.frac(y + e)) {
                        let _ = writeln!(
                            s,
                            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="{color}"/>"#,
                            py(lo.max(0.0)),
                            py(hi.min(1.0))
                        );
                    }
                }
            }
            if !path.is_empty() {
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                    path.join(" ")
                );
            }
            if let Some((slope, intercept)) = series.fit {
                // the fit lives in the plotted (possibly log) coordinates
                let ends = [xa.lo, xa.hi].map(|u| {
                    let v = slope * u + intercept;
                    (px((u - xa.lo) / (xa.hi - xa.lo)), py((v - ya.lo) / (ya.hi - ya.lo)))
                });
                let _ = writeln!(
                    s,
                    r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-dasharray="5,4"/>"#,
                    ends[0].0, ends[0].1, ends[1].0, ends[1].1
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" fill="{color}" text-anchor="end">{}</text>"#,
                LEFT + pw - 8.0,
                TOP + 18.0 + 16.0 * i as f64,
                escape(&series.label)
            );
        }
        if let Some(note) = &self.note {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
                LEFT + 10.0,
                TOP + ph - 10.0,
                escape(note)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loglog_chart_has_points_and_fit() {
        let chart = Chart {
            title: "mse vs L".into(),
            x_label: "L".into(),
            y_label: "mse".into(),
            log_x: true,
            log_y: true,
            series: vec![Series {
                label: "output".into(),
                points: vec![(16.0, 0.1, 0.01), (256.0, 0.01, 0.001), (4096.0, 0.001, 0.0001)],
                fit: Some((-0.83, -0.0)),
            }],
            note: Some("slope = -0.83 <fit>".into()),
        };
        let svg = chart.to_svg();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("stroke-dasharray"));
        assert!(svg.contains("&lt;fit&gt;"));
        assert!(svg.contains(">1e1<") && svg.contains(">1e-4<"));
    }

    #[test]
    fn nonpositive_values_are_skipped_on_log_axes() {
        let chart = Chart {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            log_x: false,
            log_y: true,
            series: vec![Series {
                label: "s".into(),
                points: vec![(0.0, 0.0, 0.0), (1.0, 1.0, 0.0)],
                fit: None,
            }],
            note: None,
        };
        assert_eq!(chart.to_svg().matches("<circle").count(), 1);
    }
}
