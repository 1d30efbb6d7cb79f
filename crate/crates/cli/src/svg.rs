//! Minimal standalone SVG line charts.

use std::fmt::Write;

const WIDTH: f64 = 520.0;
const PANEL_HEIGHT: f64 = 240.0;
const MARGIN_LEFT: f64 = 78.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 34.0;
const MARGIN_BOTTOM: f64 = 46.0;
const TICKS: usize = 5;

/// One stacked panel: a y label and its (x, y) points.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub y_label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Compact tick label with up to four significant digits.
fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        return format!("{v:.2e}");
    }
    let digits = (3 - a.log10().floor() as i32).clamp(0, 6) as usize;
    let s = format!("{v:.digits$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 * lo.abs().max(1.0) {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Renders `panels` stacked vertically over a shared x label.
pub fn line_chart(title: &str, x_label: &str, panels: &[Panel]) -> String {
    let height = PANEL_HEIGHT * panels.len().max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = PANEL_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    for (k, panel) in panels.iter().enumerate() {
        let top = k as f64 * PANEL_HEIGHT + MARGIN_TOP;
        let (x0, x1) = range(panel.points.iter().map(|p| p.0));
        let (y0, y1) = range(panel.points.iter().map(|p| p.1));
        let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
        let sy = |y: f64| top + plot_h - (y - y0) / (y1 - y0) * plot_h;

        let heading = if k == 0 { format!("{} ({})", escape(title), escape(&panel.y_label)) } else { escape(&panel.y_label) };
        let _ = writeln!(out, r#"<text x="{MARGIN_LEFT}" y="{:.1}" font-size="13">{heading}</text>"#, top - 12.0);
        let _ = writeln!(
            out,
            r#"<path d="M{l:.1},{t:.1} V{b:.1} H{r:.1}" fill="none" stroke="black"/>"#,
            l = MARGIN_LEFT,
            t = top,
            b = top + plot_h,
            r = MARGIN_LEFT + plot_w
        );
        for i in 0..TICKS {
            let f = i as f64 / (TICKS - 1) as f64;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let (px, py) = (sx(xv), sy(yv));
            let _ = writeln!(
                out,
                r##"<line x1="{px:.1}" y1="{b:.1}" x2="{px:.1}" y2="{b2:.1}" stroke="black"/><text x="{px:.1}" y="{ty:.1}" text-anchor="middle">{}</text>"##,
                tick_label(xv),
                b = top + plot_h,
                b2 = top + plot_h + 4.0,
                ty = top + plot_h + 16.0
            );
            let _ = writeln!(
                out,
                r##"<line x1="{l2:.1}" y1="{py:.1}" x2="{l:.1}" y2="{py:.1}" stroke="black"/><text x="{tx:.1}" y="{ty:.1}" text-anchor="end">{}</text>"##,
                tick_label(yv),
                l = MARGIN_LEFT,
                l2 = MARGIN_LEFT - 4.0,
                tx = MARGIN_LEFT - 7.0,
                ty = py + 4.0
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + plot_w / 2.0,
            top + plot_h + 34.0,
            escape(x_label)
        );
        if !panel.points.is_empty() {
            let coords: Vec<String> = panel.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(out, r##"<polyline points="{}" fill="none" stroke="#1f5fa8" stroke-width="1.8"/>"##, coords.join(" "));
            for &(x, y) in &panel.points {
                let _ = writeln!(out, r##"<circle cx="{:.2}" cy="{:.2}" r="2.6" fill="#1f5fa8"/>"##, sx(x), sy(y));
            }
        }
    }
    out.push_str("</svg>\n");
    out
}
