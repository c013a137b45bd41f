//! Minimal deterministic SVG charts.

use std::fmt::Write as _;

pub const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

enum Mark {
    Line(Vec<(f64, f64)>),
    Points(Vec<(f64, f64)>),
    /// Closed filled polygon.
    Area(Vec<(f64, f64)>),
    /// (x0, x1, height) rectangles from y = 0.
    Bars(Vec<(f64, f64, f64)>),
    Text(f64, f64, String),
}

struct Series {
    mark: Mark,
    color: String,
    label: Option<String>,
}

pub struct Chart {
    title: String,
    x_label: String,
    y_label: String,
    x_ticks: Option<Vec<(f64, String)>>,
    series: Vec<Series>,
}

const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Round-ish tick positions covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step + 1e-9).floor() as i64;
    (first..=last).map(|k| if k == 0 { 0.0 } else { k as f64 * step }).collect()
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

impl Chart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            x_ticks: None,
            series: Vec::new(),
        }
    }

    pub fn x_ticks(&mut self, ticks: Vec<(f64, String)>) -> &mut Self {
        self.x_ticks = Some(ticks);
        self
    }

    fn push(&mut self, mark: Mark, color: &str, label: Option<&str>) -> &mut Self {
        self.series.push(Series {
            mark,
            color: color.into(),
            label: label.map(Into::into),
        });
        self
    }

    pub fn line(&mut self, pts: Vec<(f64, f64)>, color: &str, label: Option<&str>) -> &mut Self {
        self.push(Mark::Line(pts), color, label)
    }

    pub fn points(&mut self, pts: Vec<(f64, f64)>, color: &str, label: Option<&str>) -> &mut Self {
        self.push(Mark::Points(pts), color, label)
    }

    pub fn area(&mut self, pts: Vec<(f64, f64)>, color: &str, label: Option<&str>) -> &mut Self {
        self.push(Mark::Area(pts), color, label)
    }

    pub fn bars(&mut self, bars: Vec<(f64, f64, f64)>, color: &str, label: Option<&str>) -> &mut Self {
        self.push(Mark::Bars(bars), color, label)
    }

    pub fn text(&mut self, x: f64, y: f64, text: &str) -> &mut Self {
        self.push(Mark::Text(x, y, text.into()), "#000", None)
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for s in &self.series {
            match &s.mark {
                Mark::Line(p) | Mark::Points(p) | Mark::Area(p) => {
                    xs.extend(p.iter().map(|q| q.0));
                    ys.extend(p.iter().map(|q| q.1));
                }
                Mark::Bars(b) => {
                    for &(x0, x1, h) in b {
                        xs.extend([x0, x1]);
                        ys.extend([0.0, h]);
                    }
                }
                Mark::Text(x, y, _) => {
                    xs.push(*x);
                    ys.push(*y);
                }
            }
        }
        if let Some(t) = &self.x_ticks {
            xs.extend(t.iter().map(|t| t.0));
        }
        let finite = |v: Vec<f64>| v.into_iter().filter(|x| x.is_finite()).collect::<Vec<_>>();
        let (xs, ys) = (finite(xs), finite(ys));
        let range = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.05 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        let (x0, x1) = range(&xs);
        let (y0, y1) = range(&ys);
        (x0, x1, y0, y1)
    }

    pub fn render(&self) -> String {
        let (x0, x1, y0, y1) = self.bounds();
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;
        let path = |p: &[(f64, f64)]| {
            p.iter()
                .filter(|q| q.0.is_finite() && q.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect::<Vec<_>>()
                .join(" ")
        };

        let mut o = String::new();
        let _ = writeln!(
            o,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(o, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            o,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + pw / 2.0,
            esc(&self.title)
        );
        let _ = writeln!(
            o,
            r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
        );
        let xt: Vec<(f64, String)> = match &self.x_ticks {
            Some(t) => t.clone(),
            None => ticks(x0, x1).into_iter().map(|t| (t, fmt_tick(t))).collect(),
        };
        for (t, label) in xt {
            let x = sx(t);
            let _ = writeln!(
                o,
                r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#444"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 18.0,
                esc(&label)
            );
        }
        for t in ticks(y0, y1) {
            let y = sy(t);
            let _ = writeln!(
                o,
                r##"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="#444"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                LEFT - 5.0,
                LEFT - 8.0,
                y + 4.0,
                fmt_tick(t)
            );
        }
        let _ = writeln!(
            o,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            H - 12.0,
            esc(&self.x_label)
        );
        let _ = writeln!(
            o,
            r#"<text transform="translate(18,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            TOP + ph / 2.0,
            esc(&self.y_label)
        );

        let mut legend = Vec::new();
        for s in &self.series {
            let c = &s.color;
            match &s.mark {
                Mark::Line(p) => {
                    let _ = writeln!(o, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, path(p));
                }
                Mark::Points(p) => {
                    for &(x, y) in p.iter().filter(|q| q.0.is_finite() && q.1.is_finite()) {
                        let _ = writeln!(
                            o,
                            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}" fill-opacity="0.7"/>"#,
                            sx(x),
                            sy(y)
                        );
                    }
                }
                Mark::Area(p) => {
                    let _ = writeln!(
                        o,
                        r#"<polygon points="{}" fill="{c}" fill-opacity="0.35" stroke="{c}"/>"#,
                        path(p)
                    );
                }
                Mark::Bars(b) => {
                    for &(a, bb, h) in b {
                        let (xa, xb) = (sx(a), sx(bb));
                        let (ya, yb) = (sy(h.max(0.0)), sy(0.0));
                        let _ = writeln!(
                            o,
                            r#"<rect x="{xa:.2}" y="{ya:.2}" width="{:.2}" height="{:.2}" fill="{c}" fill-opacity="0.3"/>"#,
                            (xb - xa).max(0.0),
                            (yb - ya).max(0.0)
                        );
                    }
                }
                Mark::Text(x, y, t) => {
                    let _ = writeln!(
                        o,
                        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                        sx(*x),
                        sy(*y),
                        esc(t)
                    );
                }
            }
            if let Some(l) = &s.label {
                legend.push((l.clone(), c.clone()));
            }
        }
        for (i, (label, c)) in legend.iter().enumerate() {
            let y = TOP + 10.0 + 18.0 * i as f64;
            let x = W - RIGHT + 12.0;
            let _ = writeln!(
                o,
                r#"<rect x="{x:.1}" y="{:.1}" width="12" height="12" fill="{c}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                y - 10.0,
                x + 18.0,
                y,
                esc(label)
            );
        }
        o.push_str("</svg>\n");
        o
    }
}
