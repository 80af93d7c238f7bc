//! Horizontal attribution bar chart with uncertainty whiskers.
//!
//! Bars show `Φ_j`; each whisker runs from `Φ_j + Φ_j^{−ε}` to
//! `Φ_j + Φ_j^{+ε}` with a round cap on the `+ε` end and a square cap on the
//! `−ε` end. Features are sorted by `|Φ_j|`, largest first.

use std::fmt::Write as _;

use quce_core::explain::ExplanationDocument;

const WIDTH: f64 = 760.0;
const LABEL_W: f64 = 230.0;
const PLOT_X0: f64 = 250.0;
const PLOT_X1: f64 = 730.0;
const ROW_H: f64 = 22.0;
const TOP: f64 = 48.0;
const BOTTOM: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn render(doc: &ExplanationDocument) -> String {
    let feats = &doc.attributions;
    let mut order: Vec<usize> = (0..feats.len()).collect();
    order.sort_by(|&a, &b| {
        feats[b]
            .attribution
            .abs()
            .partial_cmp(&feats[a].attribution.abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut lo: f64 = 0.0;
    let mut hi: f64 = 0.0;
    for f in feats {
        let mut ends = vec![f.attribution];
        if let (Some(p), Some(m)) = (f.plus, f.minus) {
            ends.extend([f.attribution + p, f.attribution + m]);
        }
        for v in ends.into_iter().filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if hi - lo <= f64::EPSILON {
        lo = -1.0;
        hi = 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let x = |v: f64| PLOT_X0 + (v - lo) / (hi - lo) * (PLOT_X1 - PLOT_X0);
    let height = TOP + ROW_H * feats.len() as f64 + BOTTOM;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{height:.0}" viewBox="0 0 {WIDTH:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let title = format!(
        "{:?} attribution toward class {} (valid: {}, gap {:.2e})",
        doc.method, doc.target_class, doc.valid, doc.completeness_gap
    );
    let _ = writeln!(
        s,
        r#"<text x="10" y="22" font-size="14">{}</text>"#,
        escape(&title.to_lowercase())
    );
    let zero = x(0.0);
    let bottom = TOP + ROW_H * feats.len() as f64;
    let _ = writeln!(
        s,
        r##"<line x1="{zero:.2}" y1="{:.2}" x2="{zero:.2}" y2="{bottom:.2}" stroke="#444" stroke-width="1"/>"##,
        TOP - 6.0
    );
    for (row, &j) in order.iter().enumerate() {
        let f = &feats[j];
        let cy = TOP + ROW_H * row as f64 + ROW_H / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LABEL_W,
            cy + 4.0,
            escape(&f.feature)
        );
        let (a, b) = (zero.min(x(f.attribution)), zero.max(x(f.attribution)));
        let fill = if f.attribution >= 0.0 { "#3b7dd8" } else { "#d8593b" };
        let _ = writeln!(
            s,
            r#"<rect x="{a:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#,
            cy - ROW_H * 0.3,
            b - a,
            ROW_H * 0.6
        );
        if let (Some(p), Some(m)) = (f.plus, f.minus) {
            let (xp, xm) = (x(f.attribution + p), x(f.attribution + m));
            let _ = writeln!(
                s,
                r##"<line x1="{xm:.2}" y1="{cy:.2}" x2="{xp:.2}" y2="{cy:.2}" stroke="#222" stroke-width="1.5"/>"##
            );
            let _ = writeln!(s, r##"<circle cx="{xp:.2}" cy="{cy:.2}" r="3" fill="#222"/>"##);
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="6" height="6" fill="#222"/>"##,
                xm - 3.0,
                cy - 3.0
            );
        }
    }
    for (v, anchor) in [(lo, "start"), (0.0, "middle"), (hi, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="{anchor}">{v:.3}</text>"#,
            x(v),
            bottom + 18.0
        );
    }
    s.push_str("</svg>\n");
    s
}
