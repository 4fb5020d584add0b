//! Hand-rolled SVG charts. Presentation only.

use std::fmt::Write;

use super::report::ClassRow;
use super::LayerDelta;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + (W - LEFT - RIGHT) / 2.0,
        escape(title)
    );
    s
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = if self.x1 > self.x0 {
            self.x1 - self.x0
        } else {
            1.0
        };
        LEFT + (x - self.x0) / span * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let span = if self.y1 > self.y0 {
            self.y1 - self.y0
        } else {
            1.0
        };
        H - BOTTOM - (y - self.y0) / span * (H - TOP - BOTTOM)
    }

    fn axes(&self, s: &mut String, xlabel: &str, ylabel: &str) {
        let (l, r, t, b) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = writeln!(
            s,
            r#"<path d="M{l} {t} V{b} H{r}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let v = self.y0 + (self.y1 - self.y0) * f64::from(i) / 4.0;
            let y = self.py(v);
            let _ = writeln!(
                s,
                r##"<line x1="{:.1}" y1="{y:.1}" x2="{l}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
                l - 4.0,
                l - 6.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            (l + r) / 2.0,
            H - 12.0,
            escape(xlabel)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            (t + b) / 2.0,
            (t + b) / 2.0,
            escape(ylabel)
        );
    }
}

fn legend(s: &mut String, i: usize, label: &str, color: &str) {
    let x = W - RIGHT + 12.0;
    let y = TOP + 16.0 * i as f64;
    let _ = writeln!(
        s,
        r#"<rect x="{x}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
        y - 9.0,
        x + 14.0,
        y,
        escape(label)
    );
}

/// `(t_size, mean, lower, upper)` points of one arm.
pub type AccuracyCurve = (String, Vec<(usize, f64, f64, f64)>);

/// Mean accuracy vs |T| per arm with a shaded interval band. Points are
/// `(t_size, mean, lower, upper)`.
pub fn accuracy_svg(curves: &[AccuracyCurve]) -> String {
    let mut s = open("Accuracy vs labeled set size");
    let pts = curves.iter().flat_map(|c| c.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(t, _, lo, hi) in pts {
        x0 = x0.min(t as f64);
        x1 = x1.max(t as f64);
        y0 = y0.min(lo);
        y1 = y1.max(hi);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let f = Frame {
        x0,
        x1,
        y0: y0.clamp(0.0, 1.0).min(y1),
        y1: y1.clamp(0.0, 1.0).max(y0.clamp(0.0, 1.0) + 1e-3),
    };
    f.axes(&mut s, "|T|", "accuracy");
    for (i, (label, p)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if p.len() > 1 {
            let mut band = String::new();
            for &(t, _, _, hi) in p {
                let _ = write!(band, "{:.2},{:.2} ", f.px(t as f64), f.py(hi.min(f.y1)));
            }
            for &(t, _, lo, _) in p.iter().rev() {
                let _ = write!(band, "{:.2},{:.2} ", f.px(t as f64), f.py(lo.max(f.y0)));
            }
            let _ = writeln!(
                s,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                band.trim_end()
            );
        }
        let line: Vec<String> = p
            .iter()
            .map(|&(t, m, _, _)| format!("{:.2},{:.2}", f.px(t as f64), f.py(m)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        for &(t, m, _, _) in p {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#,
                f.px(t as f64),
                f.py(m)
            );
        }
        legend(&mut s, i, label, color);
    }
    s.push_str("</svg>\n");
    s
}

/// Bar per layer with one-standard-deviation whiskers; embeddings (layer
/// -1) are left out. A red dashed line separates encoder and head at
/// `first_head_layer`.
pub fn mad_svg(deltas: &[LayerDelta], first_head_layer: i32, title: &str) -> String {
    let mut s = open(title);
    let bars: Vec<&LayerDelta> = deltas.iter().filter(|d| d.layer >= 0).collect();
    let top = bars
        .iter()
        .map(|d| d.mad + d.variance.sqrt())
        .fold(0.0, f64::max);
    let n = bars.len().max(1) as f64;
    let f = Frame {
        x0: 0.0,
        x1: n,
        y0: 0.0,
        y1: if top > 0.0 { top * 1.05 } else { 1.0 },
    };
    f.axes(&mut s, "layer", "mean absolute difference");
    let slot = (W - LEFT - RIGHT) / n;
    for (i, d) in bars.iter().enumerate() {
        let x = f.px(i as f64) + slot * 0.15;
        let y = f.py(d.mad);
        let color = if d.layer >= first_head_layer {
            PALETTE[3]
        } else {
            PALETTE[0]
        };
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
            slot * 0.7,
            (H - BOTTOM - y).max(0.0)
        );
        let sd = d.variance.sqrt();
        let cx = x + slot * 0.35;
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
            f.py(d.mad + sd),
            f.py((d.mad - sd).max(0.0))
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{:.1}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 14.0,
            d.layer
        );
    }
    if let Some(pos) = bars.iter().position(|d| d.layer >= first_head_layer) {
        let x = f.px(pos as f64);
        let _ = writeln!(
            s,
            r#"<line class="head-boundary" data-layer="{first_head_layer}" x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.1}" stroke="red" stroke-dasharray="6 3" stroke-width="2"/>"#,
            H - BOTTOM
        );
    }
    legend(&mut s, 0, "encoder", PALETTE[0]);
    legend(&mut s, 1, "head", PALETTE[3]);
    s.push_str("</svg>\n");
    s
}

/// Stacked per-class counts of T by round.
pub fn classes_svg(rows: &[ClassRow], title: &str) -> String {
    let mut s = open(title);
    let mut rounds: Vec<usize> = rows.iter().map(|r| r.round).collect();
    rounds.dedup();
    rounds.sort_unstable();
    rounds.dedup();
    let mut classes: Vec<&str> = Vec::new();
    for r in rows {
        if !classes.contains(&r.class.as_str()) {
            classes.push(&r.class);
        }
    }
    let total = |round: usize| {
        rows.iter()
            .filter(|r| r.round == round)
            .map(|r| r.count)
            .sum::<f64>()
    };
    let top = rounds.iter().map(|&r| total(r)).fold(0.0, f64::max);
    let n = rounds.len().max(1) as f64;
    let f = Frame {
        x0: 0.0,
        x1: n,
        y0: 0.0,
        y1: if top > 0.0 { top } else { 1.0 },
    };
    f.axes(&mut s, "round", "|T_c|");
    let slot = (W - LEFT - RIGHT) / n;
    for (i, &round) in rounds.iter().enumerate() {
        let x = f.px(i as f64) + slot * 0.15;
        let mut base = 0.0;
        for (k, class) in classes.iter().enumerate() {
            let c = rows
                .iter()
                .find(|r| r.round == round && r.class == *class)
                .map_or(0.0, |r| r.count);
            let (ya, yb) = (f.py(base + c), f.py(base));
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{ya:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                slot * 0.7,
                (yb - ya).max(0.0),
                PALETTE[k % PALETTE.len()]
            );
            base += c;
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.1}" text-anchor="middle">{round}</text>"#,
            x + slot * 0.35,
            H - BOTTOM + 14.0
        );
    }
    for (k, class) in classes.iter().enumerate() {
        legend(&mut s, k, class, PALETTE[k % PALETTE.len()]);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta(layer: i32, mad: f64) -> LayerDelta {
        LayerDelta {
            layer,
            mad,
            variance: mad * mad / 4.0,
            count: 10,
        }
    }

    #[test]
    fn mad_chart_marks_head_boundary() {
        let d = vec![
            delta(-1, 0.0),
            delta(0, 0.0),
            delta(1, 0.01),
            delta(2, 0.05),
            delta(3, 0.04),
        ];
        let svg = mad_svg(&d, 2, "drift");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains(r#"class="head-boundary" data-layer="2""#));
        // Four bars: embeddings are excluded.
        assert_eq!(svg.matches("<rect x=").count(), 4 + 2);
    }

    #[test]
    fn charts_are_balanced_xml() {
        let acc = accuracy_svg(&[("a<b".into(), vec![(10, 0.5, 0.4, 0.6), (30, 0.7, 0.6, 0.8)])]);
        assert!(acc.contains("a&lt;b"));
        for svg in [acc, classes_svg(&[], "empty")] {
            assert_eq!(svg.matches("<svg").count(), 1);
            assert_eq!(svg.matches("</svg>").count(), 1);
        }
    }
}
