//! Minimal SVG line charts.

use std::fmt::Write;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 48.0;
const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
    pub log_y: bool,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(panel: &Panel) -> Option<(f64, f64, f64, f64)> {
    let mut it = panel
        .series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(_, y)| y.is_finite() && (!panel.log_y || *y > 0.0))
        .map(|&(x, y)| (x, if panel.log_y { y.log10() } else { y }));
    let (x0, y0) = it.next()?;
    let (mut xl, mut xh, mut yl, mut yh) = (x0, x0, y0, y0);
    for (x, y) in it {
        xl = xl.min(x);
        xh = xh.max(x);
        yl = yl.min(y);
        yh = yh.max(y);
    }
    if xh == xl {
        xh = xl + 1.0;
    }
    if yh == yl {
        yh = yl + 1.0;
    }
    Some((xl, xh, yl, yh))
}

fn draw_panel(out: &mut String, panel: &Panel, ox: f64) {
    let _ = writeln!(out, r#"<g transform="translate({ox},0)">"#);
    let (pw, ph) = (PANEL_W - 2.0 * MARGIN, PANEL_H - 2.0 * MARGIN);
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let title = if panel.log_y { format!("{} (log10)", panel.title) } else { panel.title.clone() };
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#,
        PANEL_W / 2.0,
        MARGIN - 12.0,
        escape(&title)
    );
    let Some((xl, xh, yl, yh)) = bounds(panel) else {
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">no data</text></g>"#, PANEL_W / 2.0, PANEL_H / 2.0);
        return;
    };
    let sx = |x: f64| MARGIN + (x - xl) / (xh - xl) * pw;
    let sy = |y: f64| MARGIN + ph - (y - yl) / (yh - yl) * ph;
    for (v, anchor, x, y) in [
        (xl, "start", MARGIN, PANEL_H - MARGIN + 14.0),
        (xh, "end", PANEL_W - MARGIN, PANEL_H - MARGIN + 14.0),
    ] {
        let _ = writeln!(out, r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-size="10">{v}</text>"#);
    }
    for (v, y) in [(yl, MARGIN + ph), (yh, MARGIN + 8.0)] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{y}" text-anchor="end" font-size="10">{:.3}</text>"#,
            MARGIN - 4.0,
            v
        );
    }
    for (i, s) in panel.series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(_, y)| y.is_finite() && (!panel.log_y || *y > 0.0))
            .map(|&(x, y)| {
                let y = if panel.log_y { y.log10() } else { y };
                format!("{:.2},{:.2}", sx(x), sy(y))
            })
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="10" fill="{color}">{}</text>"#,
            MARGIN + 4.0,
            MARGIN + 12.0 * (i as f64 + 1.0),
            escape(&s.name)
        );
    }
    out.push_str("</g>\n");
}

/// Panels laid out side by side.
pub fn render(panels: &[Panel]) -> String {
    let w = PANEL_W * panels.len().max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{PANEL_H}" viewBox="0 0 {w} {PANEL_H}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        draw_panel(&mut out, p, i as f64 * PANEL_W);
    }
    out.push_str("</svg>\n");
    out
}
