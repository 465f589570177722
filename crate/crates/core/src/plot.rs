//! Minimal raster bar charts for report artifacts.
//!
//! Renders grouped bar charts (e.g. success rate per framework and attack
//! path) straight into a PNG with a built-in 5x7 pixel font, so reports need
//! no plotting toolchain. Rendering is deterministic: the same chart produces
//! the same bytes.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// One labeled cluster of bars, one value per series.
#[derive(Debug, Clone)]
pub struct BarGroup {
    /// Label drawn under the cluster.
    pub label: String,
    /// One value per series, in series order, each in [0, 1].
    pub values: Vec<f64>,
}

/// A grouped bar chart of rates in [0, 1], drawn as percentages.
#[derive(Debug, Clone)]
pub struct BarChart {
    pub title: String,
    /// Legend entries; every group carries one value per entry.
    pub series: Vec<String>,
    pub groups: Vec<BarGroup>,
}

const WIDTH: u32 = 760;
const HEIGHT: u32 = 480;
const MARGIN_LEFT: u32 = 70;
const MARGIN_RIGHT: u32 = 20;
const MARGIN_TOP: u32 = 50;
const MARGIN_BOTTOM: u32 = 70;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([220, 220, 220]);

/// Fixed series palette, cycled if a chart has more series than entries.
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([66, 133, 244]),
    Rgb([219, 68, 55]),
    Rgb([244, 180, 0]),
    Rgb([15, 157, 88]),
    Rgb([171, 71, 188]),
    Rgb([0, 172, 193]),
];

pub fn series_color(series_idx: usize) -> Rgb<u8> {
    PALETTE[series_idx % PALETTE.len()]
}

impl BarChart {
    pub fn validate(&self) -> Result<()> {
        if self.series.is_empty() {
            return Err(Error::InvalidParam("chart has no series".into()));
        }
        if self.groups.is_empty() {
            return Err(Error::InvalidParam("chart has no groups".into()));
        }
        for g in &self.groups {
            if g.values.len() != self.series.len() {
                return Err(Error::InvalidParam(format!(
                    "group `{}` has {} values for {} series",
                    g.label,
                    g.values.len(),
                    self.series.len()
                )));
            }
            for &v in &g.values {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidParam(format!(
                        "group `{}` has rate {v} outside [0, 1]",
                        g.label
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rasterize the chart.
    pub fn render(&self) -> Result<RgbImage> {
        self.validate()?;
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);

        let plot_left = MARGIN_LEFT;
        let plot_right = WIDTH - MARGIN_RIGHT;
        let plot_top = MARGIN_TOP;
        let plot_bottom = HEIGHT - MARGIN_BOTTOM;
        let plot_w = plot_right - plot_left;
        let plot_h = plot_bottom - plot_top;

        // Horizontal gridlines and y tick labels at 0/25/50/75/100 %.
        for tick in 0..=4u32 {
            let frac = tick as f64 / 4.0;
            let y = plot_bottom - (frac * plot_h as f64).round() as u32;
            if tick > 0 {
                hline(&mut img, plot_left, plot_right, y, GRID);
            }
            let label = format!("{}%", tick * 25);
            let tx = plot_left.saturating_sub(6 * label.len() as u32 + 8);
            draw_text(&mut img, tx, y.saturating_sub(3), &label, 1, AXIS);
        }

        // Bars.
        let n_groups = self.groups.len() as u32;
        let n_series = self.series.len() as u32;
        let group_w = plot_w / n_groups;
        let pad = group_w / 10;
        let bar_w = ((group_w - 2 * pad) / n_series).max(1);
        for (gi, group) in self.groups.iter().enumerate() {
            let gx = plot_left + gi as u32 * group_w;
            for (si, &v) in group.values.iter().enumerate() {
                let x0 = gx + pad + si as u32 * bar_w;
                let h = (v * plot_h as f64).round() as u32;
                let y0 = plot_bottom - h;
                fill_rect(&mut img, x0, y0, bar_w.saturating_sub(2).max(1), h, series_color(si));
                let value_label = format!("{:.1}", v * 100.0);
                let lx = x0 + bar_w.saturating_sub(2) / 2;
                let lx = lx.saturating_sub(3 * value_label.len() as u32);
                draw_text(&mut img, lx, y0.saturating_sub(10), &value_label, 1, AXIS);
            }
            let lx = gx + group_w / 2;
            let lx = lx.saturating_sub(3 * group.label.len() as u32);
            draw_text(&mut img, lx, plot_bottom + 10, &group.label, 1, AXIS);
        }

        // Axes on top of the bars' edges.
        hline(&mut img, plot_left, plot_right, plot_bottom, AXIS);
        vline(&mut img, plot_left, plot_top, plot_bottom, AXIS);

        // Title.
        let tx = (WIDTH / 2).saturating_sub(6 * self.title.len() as u32 / 2);
        draw_text(&mut img, tx, 16, &self.title, 1, AXIS);

        // Legend, top-right inside the plot area.
        let legend_x = plot_right.saturating_sub(150);
        for (si, name) in self.series.iter().enumerate() {
            let y = plot_top + 8 + si as u32 * 12;
            fill_rect(&mut img, legend_x, y, 8, 8, series_color(si));
            draw_text(&mut img, legend_x + 12, y, name, 1, AXIS);
        }
        Ok(img)
    }

    /// Render and write the chart as a PNG.
    pub fn save(&self, path: &Path) -> Result<()> {
        let img = self.render()?;
        img.save(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })
    }
}

fn hline(img: &mut RgbImage, x0: u32, x1: u32, y: u32, c: Rgb<u8>) {
    if y >= img.height() {
        return;
    }
    for x in x0..=x1.min(img.width() - 1) {
        img.put_pixel(x, y, c);
    }
}

fn vline(img: &mut RgbImage, x: u32, y0: u32, y1: u32, c: Rgb<u8>) {
    if x >= img.width() {
        return;
    }
    for y in y0..=y1.min(img.height() - 1) {
        img.put_pixel(x, y, c);
    }
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, c: Rgb<u8>) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, c);
        }
    }
}

/// Draw text with the built-in font; lowercase maps to uppercase, unknown
/// characters draw as a filled box. `scale` multiplies the 5x7 glyph size.
pub fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, scale: u32, c: Rgb<u8>) {
    let mut cx = x;
    for ch in text.chars() {
        let rows = glyph(ch.to_ascii_uppercase());
        for (gy, row) in rows.iter().enumerate() {
            for gx in 0..5u32 {
                if row & (1 << (4 - gx)) != 0 {
                    fill_rect(
                        img,
                        cx + gx * scale,
                        y + gy as u32 * scale,
                        scale,
                        scale,
                        c,
                    );
                }
            }
        }
        cx += 6 * scale;
    }
}

/// 5x7 bitmap rows (bit 4 = left pixel) for the characters reports use.
fn glyph(c: char) -> [u8; 7] {
    match c {
        ' ' => [0, 0, 0, 0, 0, 0, 0],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '/' => [0x01, 0x02, 0x02, 0x04, 0x08, 0x08, 0x10],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}
