//! Two-panel loss-curve figure from a training loss log: adversarial terms
//! on the left, cycle/embedding/coronary terms on the right, one point per
//! epoch (the mean over that epoch's steps).
//!
//! `.svg` output carries titles, axes labels and legends. `.png` output
//! draws the same axes and curves without text.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_antialiased_line_segment_mut, draw_hollow_rect_mut};
use imageproc::pixelops::interpolate;
use imageproc::rect::Rect;

use crate::error::{Error, Result};
use crate::training::log::{read_loss_log, LossRecord};

pub struct Series {
    pub name: &'static str,
    pub color: [u8; 3],
    pub points: Vec<(f64, f64)>,
}

pub struct Panel {
    pub title: &'static str,
    pub series: Vec<Series>,
}

type Getter = fn(&LossRecord) -> f64;

const ADVERSARIAL: [(&str, [u8; 3], Getter); 4] = [
    ("adv_g_OH", [31, 119, 180], |r| r.adv_g_oh),
    ("adv_g_HO", [255, 127, 14], |r| r.adv_g_ho),
    ("adv_d_H", [44, 160, 44], |r| r.adv_d_h),
    ("adv_d_O", [214, 39, 40], |r| r.adv_d_o),
];

const STRUCTURAL: [(&str, [u8; 3], Getter); 3] = [
    ("cycle", [148, 103, 189], |r| r.cycle),
    ("embedding", [140, 86, 75], |r| r.embedding),
    ("coronary", [227, 119, 194], |r| r.coronary),
];

fn epoch_means(records: &[LossRecord], get: Getter) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.epoch).or_default();
        e.0 += get(r);
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(epoch, (s, n))| ((epoch + 1) as f64, s / n as f64))
        .collect()
}

/// Per-epoch panels for a set of loss records.
pub fn panels(records: &[LossRecord]) -> [Panel; 2] {
    let build = |spec: &[(&'static str, [u8; 3], Getter)]| {
        spec.iter()
            .map(|&(name, color, get)| Series {
                name,
                color,
                points: epoch_means(records, get),
            })
            .collect()
    };
    [
        Panel {
            title: "(a) adversarial losses",
            series: build(&ADVERSARIAL),
        },
        Panel {
            title: "(b) cycle, embedding and coronary losses",
            series: build(&STRUCTURAL),
        },
    ]
}

/// Data bounds with a little headroom; degenerate ranges are widened.
fn bounds(panel: &Panel) -> (f64, f64, f64, f64) {
    let pts = panel.series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, 0.0f64, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    (x0, x1, y0, y1 + 0.05 * (y1 - y0))
}

const PANEL_W: f64 = 480.0;
const PANEL_H: f64 = 320.0;
const MARGIN: f64 = 50.0;

struct Frame {
    left: f64,
    top: f64,
    bounds: (f64, f64, f64, f64),
}

impl Frame {
    fn new(index: usize, panel: &Panel) -> Self {
        Self {
            left: index as f64 * (PANEL_W + MARGIN) + MARGIN,
            top: MARGIN,
            bounds: bounds(panel),
        }
    }

    fn map(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let (x0, x1, y0, y1) = self.bounds;
        (
            self.left + (x - x0) / (x1 - x0) * PANEL_W,
            self.top + PANEL_H - (y - y0) / (y1 - y0) * PANEL_H,
        )
    }
}

fn canvas_size() -> (f64, f64) {
    (2.0 * PANEL_W + 3.0 * MARGIN, PANEL_H + 2.0 * MARGIN)
}

pub fn render_svg(panels: &[Panel; 2]) -> String {
    let (w, h) = canvas_size();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, panel) in panels.iter().enumerate() {
        let f = Frame::new(i, panel);
        let (x0, x1, y0, y1) = f.bounds;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#,
            f.left, f.top
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#,
            f.left + PANEL_W / 2.0,
            f.top - 15.0,
            panel.title
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#,
            f.left + PANEL_W / 2.0,
            f.top + PANEL_H + 35.0
        );
        for k in 0..=4 {
            let t = k as f64 / 4.0;
            let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            let (px, _) = f.map((xv, y0));
            let (_, py) = f.map((x0, yv));
            let _ = writeln!(
                s,
                r#"<text x="{px}" y="{}" text-anchor="middle">{xv:.0}</text>"#,
                f.top + PANEL_H + 15.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{yv:.3}</text>"#,
                f.left - 4.0,
                py + 4.0
            );
        }
        for (k, series) in panel.series.iter().enumerate() {
            let [r, g, b] = series.color;
            let pts: Vec<String> = series
                .points
                .iter()
                .map(|&p| {
                    let (x, y) = f.map(p);
                    format!("{x:.1},{y:.1}")
                })
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="rgb({r},{g},{b})" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            );
            let ly = f.top + 15.0 + 14.0 * k as f64;
            let lx = f.left + PANEL_W - 120.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="rgb({r},{g},{b})" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                lx + 20.0,
                lx + 25.0,
                ly + 4.0,
                series.name
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn render_png(panels: &[Panel; 2]) -> RgbImage {
    let (w, h) = canvas_size();
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]));
    for (i, panel) in panels.iter().enumerate() {
        let f = Frame::new(i, panel);
        let frame = Rect::at(f.left as i32, f.top as i32).of_size(PANEL_W as u32, PANEL_H as u32);
        draw_hollow_rect_mut(&mut img, frame, Rgb([0, 0, 0]));
        for series in &panel.series {
            for pair in series.points.windows(2) {
                let (a, b) = (f.map(pair[0]), f.map(pair[1]));
                draw_antialiased_line_segment_mut(
                    &mut img,
                    (a.0.round() as i32, a.1.round() as i32),
                    (b.0.round() as i32, b.1.round() as i32),
                    Rgb(series.color),
                    interpolate,
                );
            }
        }
    }
    img
}

/// Reads `loss_csv` and writes the figure; the format follows the
/// extension of `out` (`svg` or `png`).
pub fn plot_losses(loss_csv: &Path, out: &Path) -> Result<()> {
    let records = read_loss_log(loss_csv)?;
    if records.is_empty() {
        return Err(Error::format(loss_csv, "no loss records to plot"));
    }
    let p = panels(&records);
    match out.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(e) if e == "svg" => std::fs::write(out, render_svg(&p)).map_err(|e| Error::io(out, e)),
        Some(e) if e == "png" => render_png(&p).save(out).map_err(|e| Error::format(out, e)),
        _ => Err(Error::validation(
            "plot output",
            format!("{}: use a .svg or .png extension", out.display()),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossBreakdown;

    fn records() -> Vec<LossRecord> {
        let mut out = Vec::new();
        for e in 0..3 {
            for s in 0..2 {
                let b = LossBreakdown {
                    cycle: (e * 2 + s) as f64,
                    ..Default::default()
                };
                out.push(LossRecord::new(e, s, 1e-4, &b));
            }
        }
        out
    }

    #[test]
    fn epoch_means_average_steps() {
        let p = panels(&records());
        assert_eq!(p[0].series.len(), 4);
        assert_eq!(p[1].series[0].name, "cycle");
        assert_eq!(p[1].series[0].points, vec![(1.0, 0.5), (2.0, 2.5), (3.0, 4.5)]);
    }

    #[test]
    fn writes_both_formats_and_rejects_others() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("losses.csv");
        let mut log = crate::training::log::LossLog::open(&csv, 0).unwrap();
        for r in records() {
            log.push(&r).unwrap();
        }
        drop(log);
        plot_losses(&csv, &dir.path().join("f.svg")).unwrap();
        plot_losses(&csv, &dir.path().join("f.png")).unwrap();
        let svg = std::fs::read_to_string(dir.path().join("f.svg")).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 7);
        assert!(svg.contains("(a) adversarial losses"));
        assert!(plot_losses(&csv, &dir.path().join("f.gif")).is_err());
    }
}
