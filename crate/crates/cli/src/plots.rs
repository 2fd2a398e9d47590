//! ROC and confusion-matrix images drawn directly into RGB buffers.
//!
//! The ROC plot has FPR on x and TPR on y over the unit square, a grey chance
//! diagonal, and one polyline per curve. The confusion plot is a 2×2 grid
//! (rows: actual real/fake, columns: predicted real/fake) shaded by count.

use std::path::Path;

use deepfake_core::evalsuite::{ConfusionMatrix, RocCurve};
use image::{Rgb, RgbImage};

use crate::error::{CliError, CliResult};

const SIZE: u32 = 400;
const MARGIN: u32 = 30;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: [u8; 3], dashed: bool) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        if dashed && (i / 4) % 2 == 1 {
            continue;
        }
        let t = i as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            put(img, x.round() as i64 + dx, y.round() as i64 + dy, c);
        }
    }
}

fn save(img: &RgbImage, path: &Path) -> CliResult<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CliError::io(path, e))
}

/// Unit-square coordinates to pixels; y grows upward.
fn to_px(x: f64, y: f64) -> (f64, f64) {
    let span = (SIZE - 2 * MARGIN) as f64;
    (MARGIN as f64 + x * span, (SIZE - MARGIN) as f64 - y * span)
}

pub fn roc_plot(curves: &[(String, RocCurve)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let black = [0, 0, 0];
    line(&mut img, to_px(0.0, 0.0), to_px(1.0, 0.0), black, false);
    line(&mut img, to_px(0.0, 0.0), to_px(0.0, 1.0), black, false);
    for t in 1..=4 {
        let v = t as f64 / 4.0;
        let (x, y) = to_px(v, 0.0);
        line(&mut img, (x, y), (x, y + 5.0), black, false);
        let (x, y) = to_px(0.0, v);
        line(&mut img, (x - 5.0, y), (x, y), black, false);
    }
    line(&mut img, to_px(0.0, 0.0), to_px(1.0, 1.0), [160, 160, 160], true);
    for (k, (_, c)) in curves.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        for i in 1..c.fpr.len() {
            line(
                &mut img,
                to_px(c.fpr[i - 1], c.tpr[i - 1]),
                to_px(c.fpr[i], c.tpr[i]),
                colour,
                false,
            );
        }
    }
    img
}

pub fn confusion_plot(m: &ConfusionMatrix) -> RgbImage {
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let cells = [[m.tn, m.fp], [m.fn_, m.tp]];
    let max = cells.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let cell = (SIZE - 2 * MARGIN) / 2;
    for (r, row) in cells.iter().enumerate() {
        for (c, &count) in row.iter().enumerate() {
            let shade = count as f64 / max;
            let colour = [
                (255.0 - shade * 224.0).round() as u8,
                (255.0 - shade * 136.0).round() as u8,
                (255.0 - shade * 75.0).round() as u8,
            ];
            let (x0, y0) = (MARGIN + c as u32 * cell, MARGIN + r as u32 * cell);
            for y in y0..y0 + cell {
                for x in x0..x0 + cell {
                    let border = x == x0 || y == y0 || x == x0 + cell - 1 || y == y0 + cell - 1;
                    img.put_pixel(x, y, Rgb(if border { [0, 0, 0] } else { colour }));
                }
            }
        }
    }
    img
}

pub fn write_roc(path: &Path, curves: &[(String, RocCurve)]) -> CliResult<()> {
    save(&roc_plot(curves), path)
}

pub fn write_confusion(path: &Path, m: &ConfusionMatrix) -> CliResult<()> {
    save(&confusion_plot(m), path)
}
