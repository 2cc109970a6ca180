//! Minimal SVG panel grids for calibration curves.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One calibration curve placed at (`row`, `col`) of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub row: String,
    pub col: String,
    /// `(x, y)` points, drawn in the given order.
    pub points: Vec<(f64, f64)>,
}

/// Shared data range of every panel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    /// Union of all finite points; `None` when there are none.
    pub fn of(panels: &[Panel]) -> Option<Self> {
        let mut pts = panels
            .iter()
            .flat_map(|p| p.points.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite());
        let &(x0, y0) = pts.next()?;
        let mut b = Bounds {
            x_min: x0,
            x_max: x0,
            y_min: y0,
            y_max: y0,
        };
        for &(x, y) in pts {
            b.x_min = b.x_min.min(x);
            b.x_max = b.x_max.max(x);
            b.y_min = b.y_min.min(y);
            b.y_max = b.y_max.max(y);
        }
        Some(b)
    }
}

/// Rendered grid: the SVG text plus the layout that produced it.
#[derive(Debug, Clone)]
pub struct GridPlot {
    pub svg: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub bounds: Bounds,
}

const PANEL_W: f64 = 240.0;
const PANEL_H: f64 = 180.0;
const GAP: f64 = 30.0;
const LEFT: f64 = 90.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 50.0;

/// Round numbers spanning `[lo, hi]`, about `n` of them.
pub fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if !(hi > lo) || n == 0 {
        return vec![lo];
    }
    let raw = (hi - lo) / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .min_by(|a, b| (a / raw).ln().abs().total_cmp(&(b / raw).ln().abs()))
        .unwrap();
    let first = (lo / step - 1e-9).ceil() as i64;
    let last = (hi / step + 1e-9).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

/// Lays out `panels` with rows and columns in first-appearance order and one
/// set of axes shared by all of them.
pub fn render_grid(panels: &[Panel], x_label: &str, y_label: &str) -> Result<GridPlot> {
    if panels.is_empty() {
        return Err(Error::data("nothing to plot"));
    }
    let mut rows: Vec<String> = Vec::new();
    let mut cols: Vec<String> = Vec::new();
    for p in panels {
        if !rows.contains(&p.row) {
            rows.push(p.row.clone());
        }
        if !cols.contains(&p.col) {
            cols.push(p.col.clone());
        }
    }
    let bounds = Bounds::of(panels).ok_or_else(|| Error::data("no finite points to plot"))?;
    // Degenerate ranges still need a nonzero span on screen.
    let span = |lo: f64, hi: f64| {
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let (x0, x1) = span(bounds.x_min, bounds.x_max);
    let (y0, y1) = span(bounds.y_min, bounds.y_max);

    let width = LEFT + cols.len() as f64 * (PANEL_W + GAP);
    let height = TOP + rows.len() as f64 * (PANEL_H + GAP) + BOTTOM;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let xticks = nice_ticks(x0, x1, 5);
    let yticks = nice_ticks(y0, y1, 4);

    for (ci, col) in cols.iter().enumerate() {
        let cx = LEFT + ci as f64 * (PANEL_W + GAP) + PANEL_W / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-weight="bold">{}</text>"#,
            TOP - 20.0,
            escape(col)
        );
    }
    for (ri, row) in rows.iter().enumerate() {
        let cy = TOP + ri as f64 * (PANEL_H + GAP) + PANEL_H / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="18" y="{cy:.1}" text-anchor="middle" font-weight="bold" transform="rotate(-90 18 {cy:.1})">{}</text>"#,
            escape(row)
        );
    }

    for (ri, row) in rows.iter().enumerate() {
        for (ci, col) in cols.iter().enumerate() {
            let px = LEFT + ci as f64 * (PANEL_W + GAP);
            let py = TOP + ri as f64 * (PANEL_H + GAP);
            let sx = |x: f64| px + (x - x0) / (x1 - x0) * PANEL_W;
            let sy = |y: f64| py + PANEL_H - (y - y0) / (y1 - y0) * PANEL_H;
            let _ = writeln!(
                s,
                r##"<g class="panel" data-row="{}" data-col="{}" data-x-min="{x0}" data-x-max="{x1}" data-y-min="{y0}" data-y-max="{y1}">"##,
                escape(row),
                escape(col)
            );
            let _ = writeln!(
                s,
                r##"<rect x="{px:.1}" y="{py:.1}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#444"/>"##
            );
            for &t in &xticks {
                let x = sx(t);
                let _ = writeln!(
                    s,
                    r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/>"##,
                    py,
                    py + PANEL_H
                );
                if ri + 1 == rows.len() {
                    let _ = writeln!(
                        s,
                        r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                        py + PANEL_H + 14.0,
                        fmt_tick(t)
                    );
                }
            }
            for &t in &yticks {
                let y = sy(t);
                let _ = writeln!(
                    s,
                    r##"<line x1="{px:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##,
                    px + PANEL_W
                );
                if ci == 0 {
                    let _ = writeln!(
                        s,
                        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                        px - 4.0,
                        y + 4.0,
                        fmt_tick(t)
                    );
                }
            }
            for p in panels.iter().filter(|p| &p.row == row && &p.col == col) {
                let pts: Vec<String> = p
                    .points
                    .iter()
                    .filter(|(x, y)| x.is_finite() && y.is_finite())
                    .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                    .collect();
                let _ = writeln!(
                    s,
                    r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##,
                    pts.join(" ")
                );
                for xy in &pts {
                    let (x, y) = xy.split_once(',').unwrap();
                    let _ = writeln!(s, r##"<circle cx="{x}" cy="{y}" r="2" fill="#1f77b4"/>"##);
                }
            }
            let _ = writeln!(s, "</g>");
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + cols.len() as f64 * (PANEL_W + GAP) / 2.0,
        height - 12.0,
        escape(x_label)
    );
    let my = TOP + rows.len() as f64 * (PANEL_H + GAP) / 2.0;
    let _ = writeln!(
        s,
        r#"<text x="44" y="{my:.1}" text-anchor="middle" transform="rotate(-90 44 {my:.1})">{}</text>"#,
        escape(y_label)
    );
    let _ = writeln!(s, "</svg>");
    Ok(GridPlot {
        svg: s,
        rows,
        cols,
        bounds,
    })
}

pub fn write_svg(path: impl AsRef<Path>, plot: &GridPlot) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, &plot.svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(row: &str, col: &str, pts: &[(f64, f64)]) -> Panel {
        Panel {
            row: row.into(),
            col: col.into(),
            points: pts.to_vec(),
        }
    }

    #[test]
    fn single_panel() {
        let g = render_grid(
            &[panel("fourier", "loguniform", &[(40.0, 0.1), (200.0, 0.9)])],
            "BPM",
            "t",
        )
        .unwrap();
        assert_eq!(g.svg.matches("class=\"panel\"").count(), 1);
        assert!(g.svg.starts_with("<svg"));
        assert!(g.svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn shared_bounds_are_union() {
        let panels = vec![
            panel("acf", "a", &[(40.0, 0.2), (100.0, 0.3)]),
            panel("acf", "b", &[(50.0, 0.1)]),
            panel("fourier", "a", &[(35.0, 0.5), (300.0, 0.4)]),
            panel("fourier", "b", &[(60.0, 0.95)]),
            panel("hybrid", "a", &[(70.0, 0.3)]),
            panel("hybrid", "b", &[(80.0, 0.3), (f64::NAN, 2.0)]),
        ];
        let g = render_grid(&panels, "BPM", "t").unwrap();
        assert_eq!(g.rows, ["acf", "fourier", "hybrid"]);
        assert_eq!(g.cols, ["a", "b"]);
        assert_eq!(
            g.bounds,
            Bounds {
                x_min: 35.0,
                x_max: 300.0,
                y_min: 0.1,
                y_max: 0.95
            }
        );
        assert_eq!(g.svg.matches("class=\"panel\"").count(), 6);
        assert_eq!(
            g.svg
                .matches(r#"data-x-min="35" data-x-max="300" data-y-min="0.1" data-y-max="0.95""#)
                .count(),
            6
        );
    }

    #[test]
    fn ticks_are_round() {
        let t = nice_ticks(0.0, 1.0, 4);
        assert_eq!(
            nice_ticks(0.1, 0.95, 4),
            vec![0.2, 0.4, 0.6000000000000001, 0.8]
        );
        let expect = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        assert_eq!(t.len(), expect.len());
        assert!(t.iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-12));
        let t = nice_ticks(35.0, 300.0, 5);
        assert_eq!(t, vec![50.0, 100.0, 150.0, 200.0, 250.0, 300.0]);
    }

    #[test]
    fn empty_is_error() {
        assert!(render_grid(&[], "x", "y").is_err());
        assert!(render_grid(&[panel("a", "b", &[(f64::NAN, 1.0)])], "x", "y").is_err());
    }
}
