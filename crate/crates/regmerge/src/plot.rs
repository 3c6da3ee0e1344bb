//! Static PNG artifacts: R-matrix heatmaps and per-task loss curves.
//! Rendering is deliberately minimal (no text, fixed palette) and
//! deterministic, so re-runs produce byte-identical images.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::harness::ResultMatrix;
use crate::training::LossRecord;

const CELL: u32 = 34;
const GRID: Rgb<u8> = Rgb([70, 70, 70]);
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    img.save(path)
        .map_err(|e| Error::validation(format!("cannot write image {}: {e}", path.display())))
}

/// Low values map to dark blue, high values to warm yellow.
fn ramp(v: f64) -> Rgb<u8> {
    let t = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + t * (b - a)).round() as u8;
    Rgb([lerp(25.0, 250.0), lerp(55.0, 225.0), lerp(130.0, 55.0)])
}

/// Render a T x T result matrix as a grid of colored cells, rows top to
/// bottom in training order. Values are clamped to [0, 1].
pub fn save_heatmap(path: &Path, rm: &ResultMatrix) -> Result<()> {
    let t = rm.t() as u32;
    if t == 0 {
        return Err(Error::validation("cannot plot an empty result matrix"));
    }
    let side = t * CELL + (t + 1);
    let mut img = RgbImage::from_pixel(side, side, GRID);
    for i in 0..t {
        for j in 0..t {
            let color = ramp(rm.r.get(i as usize, j as usize));
            let y0 = i * (CELL + 1) + 1;
            let x0 = j * (CELL + 1) + 1;
            for dy in 0..CELL {
                for dx in 0..CELL {
                    img.put_pixel(x0 + dx, y0 + dy, color);
                }
            }
        }
    }
    save_png(path, &img)
}

/// Render per-task training loss curves on a shared step axis, one color per
/// task, with vertical separators at task boundaries.
pub fn save_loss_curves(path: &Path, histories: &[Vec<LossRecord>]) -> Result<()> {
    let total_steps: usize = histories.iter().map(Vec::len).sum();
    if total_steps == 0 {
        return Err(Error::validation("no loss records to plot"));
    }
    let (w, h) = (800u32, 400u32);
    let margin = 12u32;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let max_loss = histories
        .iter()
        .flatten()
        .map(|r| r.loss_total)
        .fold(f64::MIN_POSITIVE, f64::max);
    let plot_w = (w - 2 * margin) as f64;
    let plot_h = (h - 2 * margin) as f64;
    let x_of = |step: usize| {
        margin as f64 + plot_w * step as f64 / (total_steps.max(2) - 1) as f64
    };
    let y_of = |loss: f64| margin as f64 + plot_h * (1.0 - (loss / max_loss).clamp(0.0, 1.0));

    let mut base = 0usize;
    for (task_idx, hist) in histories.iter().enumerate() {
        if base > 0 {
            let x = x_of(base) as u32;
            for y in margin..(h - margin) {
                img.put_pixel(x.min(w - 1), y, Rgb([210, 210, 210]));
            }
        }
        let color = PALETTE[task_idx % PALETTE.len()];
        for pair in hist.windows(2) {
            draw_segment(
                &mut img,
                (x_of(base), y_of(pair[0].loss_total)),
                (x_of(base + 1), y_of(pair[1].loss_total)),
                color,
            );
            base += 1;
        }
        if hist.len() == 1 {
            img.put_pixel(x_of(base) as u32, y_of(hist[0].loss_total) as u32, color);
        }
        if !hist.is_empty() {
            base += 1;
        }
    }
    save_png(path, &img)
}

fn draw_segment(img: &mut RgbImage, from: (f64, f64), to: (f64, f64), color: Rgb<u8>) {
    let steps = ((to.0 - from.0).abs().max((to.1 - from.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (from.0 + t * (to.0 - from.0)).round() as u32;
        let y = (from.1 + t * (to.1 - from.1)).round() as u32;
        if x < img.width() && y < img.height() {
            img.put_pixel(x, y, color);
        }
    }
}
