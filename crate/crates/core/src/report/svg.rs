//! Dependency-free SVG rendering. Output depends only on the input values,
//! so equal inputs give byte-equal files.

use std::fmt::Write;

use crate::error::{Error, Result};

pub const CHART_WIDTH: f64 = 800.0;
pub const CHART_HEIGHT: f64 = 500.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;
const SERIES_STROKES: [&str; 4] = ["#000000", "#555555", "#999999", "#333333"];
const SERIES_DASHES: [&str; 4] = ["", "6,3", "2,3", "10,4"];

#[derive(Debug, Clone)]
pub struct Series<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Line chart of one or more series over the layer axis, on a fixed
/// 800×500 canvas.
pub fn line_chart(title: &str, metric: &str, series: &[Series<'_>]) -> Result<String> {
    let longest = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    if longest == 0 {
        return Err(Error::EmptySeries);
    }
    let (mut lo, mut hi) = series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let plot_w = CHART_WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = CHART_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let x_span = (longest - 1).max(1) as f64;
    let x_of = |i: usize| MARGIN_LEFT + plot_w * i as f64 / x_span;
    let y_of = |v: f64| MARGIN_TOP + plot_h * (hi - v) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = CHART_WIDTH,
        h = CHART_HEIGHT
    );
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{CHART_WIDTH}" height="{CHART_HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        CHART_WIDTH / 2.0,
        escape(title)
    );
    // axes
    let (x0, x1) = (MARGIN_LEFT, MARGIN_LEFT + plot_w);
    let (y0, y1) = (MARGIN_TOP, MARGIN_TOP + plot_h);
    let _ = writeln!(
        svg,
        r#"<path d="M{x0:.2},{y0:.2} L{x0:.2},{y1:.2} L{x1:.2},{y1:.2}" fill="none" stroke="black" stroke-width="1"/>"#
    );
    let x_ticks = 8.min(longest - 1).max(1);
    for k in 0..=x_ticks {
        let layer = ((longest - 1) * k) / x_ticks;
        let x = x_of(layer);
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{y1:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="11">{layer}</text>"#,
            y1 + 4.0,
            y1 + 18.0
        );
    }
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{x0:.2}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.3}</text>"#,
            x0 - 4.0,
            x0 - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="13">layer</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        CHART_HEIGHT - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{y:.2}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 18 {y:.2})">{}</text>"#,
        escape(metric),
        y = MARGIN_TOP + plot_h / 2.0
    );

    for (n, s) in series.iter().enumerate() {
        if s.values.is_empty() {
            continue;
        }
        let points: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x_of(i), y_of(v)))
            .collect();
        let stroke = SERIES_STROKES[n % SERIES_STROKES.len()];
        let dash = SERIES_DASHES[n % SERIES_DASHES.len()];
        let dash_attr = if dash.is_empty() {
            String::new()
        } else {
            format!(r#" stroke-dasharray="{dash}""#)
        };
        let _ = writeln!(
            svg,
            r#"<polyline data-series="{}" points="{}" fill="none" stroke="{stroke}" stroke-width="2"{dash_attr}/>"#,
            escape(s.name),
            points.join(" ")
        );
        let ly = MARGIN_TOP + 14.0 * n as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{stroke}" stroke-width="2"{dash_attr}/><text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11">{}</text>"#,
            x1 - 150.0,
            x1 - 125.0,
            x1 - 120.0,
            ly + 4.0,
            escape(s.name)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Gray level for a min-max normalized value: 255 at the minimum, 0 (black)
/// at the maximum. A constant matrix renders white.
pub fn gray_level(v: f64, lo: f64, hi: f64) -> u8 {
    if hi - lo <= 0.0 {
        return 255;
    }
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (255.0 * (1.0 - t)).round() as u8
}

/// Grayscale heatmap, rows top to bottom, darker = larger.
pub fn heatmap(title: &str, row_label: &str, col_label: &str, rows: &[Vec<f64>]) -> Result<String> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(Error::EmptySeries);
    }
    let (lo, hi) = rows
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let cell_w = (720 / cols).clamp(2, 24);
    let cell_h = (400 / rows.len()).clamp(2, 24);
    let (left, top) = (60usize, 40usize);
    let width = left + cols * cell_w + 20;
    let height = top + rows.len() * cell_h + 50;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        width / 2,
        escape(title)
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let g = gray_level(v, lo, hi);
            let _ = writeln!(
                svg,
                r#"<rect x="{}" y="{}" width="{cell_w}" height="{cell_h}" fill="rgb({g},{g},{g})" data-row="{r}" data-col="{c}"/>"#,
                left + c * cell_w,
                top + r * cell_h
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        cols * cell_w,
        rows.len() * cell_h
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        left + cols * cell_w / 2,
        top + rows.len() * cell_h + 30,
        escape(col_label)
    );
    let mid = top + rows.len() * cell_h / 2;
    let _ = writeln!(
        svg,
        r#"<text x="20" y="{mid}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 20 {mid})">{}</text>"#,
        escape(row_label)
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Parses the `points` of every `<polyline>` back into coordinates.
pub fn polyline_points(svg: &str) -> Vec<Vec<(f64, f64)>> {
    svg.lines()
        .filter(|l| l.starts_with("<polyline"))
        .map(|l| {
            let start = l.find("points=\"").unwrap() + 8;
            let end = start + l[start..].find('"').unwrap();
            l[start..end]
                .split(' ')
                .map(|p| {
                    let (x, y) = p.split_once(',').unwrap();
                    (x.parse().unwrap(), y.parse().unwrap())
                })
                .collect()
        })
        .collect()
}
