use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Tableau-10.
pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 640.0;
const LEGEND_W: f64 = 200.0;
const RADIUS: f64 = 3.5;

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Scatter plot of `coords` coloured by `labels`. Classes get palette
/// colours in sorted label order; the axes span the data plus 5% on each
/// side.
pub fn scatter_svg(coords: &[[f64; 2]], labels: &[String]) -> Result<String> {
    if coords.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    if coords.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} points but {} labels",
            coords.len(),
            labels.len()
        )));
    }
    if coords.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite coordinate".into()));
    }
    let classes: BTreeMap<&str, usize> = {
        let mut m = BTreeMap::new();
        for l in labels {
            m.entry(l.as_str()).or_insert(0);
        }
        m.into_keys().enumerate().map(|(i, k)| (k, i)).collect()
    };

    let axis = |k: usize| {
        let lo = coords.iter().map(|c| c[k]).fold(f64::INFINITY, f64::min);
        let hi = coords.iter().map(|c| c[k]).fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        (lo - 0.05 * span, hi + 0.05 * span)
    };
    let (x0, x1) = axis(0);
    let (y0, y1) = axis(1);
    let sx = |x: f64| (x - x0) / (x1 - x0) * PLOT_W;
    let sy = |y: f64| PLOT_H - (y - y0) / (y1 - y0) * PLOT_H;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = PLOT_W + LEGEND_W,
        h = PLOT_H
    );
    let _ = writeln!(
        s,
        r##"<rect x="0" y="0" width="{PLOT_W}" height="{PLOT_H}" fill="#ffffff" stroke="#333333"/>"##
    );
    let _ = writeln!(s, r#"<g id="points">"#);
    for (c, l) in coords.iter().zip(labels) {
        let colour = PALETTE[classes[l.as_str()] % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<circle cx="{:.3}" cy="{:.3}" r="{RADIUS}" fill="{colour}"><title>{}</title></circle>"#,
            sx(c[0]),
            sy(c[1]),
            escape(l)
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g id="legend" font-family="sans-serif" font-size="13">"#);
    for (label, &i) in &classes {
        let y = 24.0 + 20.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<g class="legend-entry"><rect x="{:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text></g>"#,
            PLOT_W + 16.0,
            y - 10.0,
            PALETTE[i % PALETTE.len()],
            PLOT_W + 34.0,
            y,
            escape(label)
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_scatter(coords: &[[f64; 2]], labels: &[String], out: &Path) -> Result<()> {
    std::fs::write(out, scatter_svg(coords, labels)?).map_err(|e| Error::io(out, e))
}
