//! Raster plots: ROC curves and per-clip score timelines.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::dataset::GroundTruthLabels;
use crate::detect::{aligned, roc_points, ScoreSeries};
use crate::error::{Error, Result};

const MARGIN: u32 = 24;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GUIDE: Rgb<u8> = Rgb([180, 180, 180]);
const CURVE: Rgb<u8> = Rgb([28, 90, 180]);
const SHADE: Rgb<u8> = Rgb([250, 214, 208]);

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(width: u32, height: u32) -> Self {
        let mut c = Self {
            img: RgbImage::from_pixel(width, height, WHITE),
        };
        let (w, h) = (width - 1 - MARGIN, height - 1 - MARGIN);
        c.line((MARGIN as f64, MARGIN as f64), (w as f64, MARGIN as f64), AXIS);
        c.line((MARGIN as f64, h as f64), (w as f64, h as f64), AXIS);
        c.line((MARGIN as f64, MARGIN as f64), (MARGIN as f64, h as f64), AXIS);
        c.line((w as f64, MARGIN as f64), (w as f64, h as f64), AXIS);
        c
    }

    fn plot_w(&self) -> f64 {
        (self.img.width() - 1 - 2 * MARGIN) as f64
    }

    fn plot_h(&self) -> f64 {
        (self.img.height() - 1 - 2 * MARGIN) as f64
    }

    /// Unit-square coordinates to pixels, y pointing up.
    fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        (
            MARGIN as f64 + x.clamp(0.0, 1.0) * self.plot_w(),
            MARGIN as f64 + (1.0 - y.clamp(0.0, 1.0)) * self.plot_h(),
        )
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
        let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let x = a.0 + t * (b.0 - a.0);
            let y = a.1 + t * (b.1 - a.1);
            self.put(x.round() as i64, y.round() as i64, c);
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], c: Rgb<u8>) {
        for w in pts.windows(2) {
            let (a, b) = (self.to_px(w[0].0, w[0].1), self.to_px(w[1].0, w[1].1));
            // Two pixels thick.
            self.line(a, b, c);
            self.line((a.0, a.1 + 1.0), (b.0, b.1 + 1.0), c);
        }
    }

    fn shade_columns(&mut self, x0: f64, x1: f64, c: Rgb<u8>) {
        let (a, top) = self.to_px(x0, 1.0);
        let (b, bottom) = self.to_px(x1, 0.0);
        for x in a.round() as i64..=b.round() as i64 {
            for y in top.round() as i64 + 1..bottom.round() as i64 {
                self.put(x, y, c);
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// ROC curve over the diagonal chance line.
pub fn roc_image(points: &[(f64, f64)], size: u32) -> RgbImage {
    let mut c = Canvas::new(size, size);
    let (a, b) = (c.to_px(0.0, 0.0), c.to_px(1.0, 1.0));
    c.line(a, b, GUIDE);
    c.polyline(points, CURVE);
    c.img
}

/// Score curve over time with ground-truth anomalous frames shaded.
/// `scores` are scaled to the unit interval by their own range.
pub fn timeline_image(scores: &[f64], flags: &[bool], width: u32, height: u32) -> RgbImage {
    let mut c = Canvas::new(width, height);
    let n = scores.len().max(flags.len());
    let span = (n.max(2) - 1) as f64;
    for (i, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
        let x0 = (i as f64 - 0.5).max(0.0) / span;
        let x1 = ((i as f64 + 0.5) / span).min(1.0);
        c.shade_columns(x0, x1, SHADE);
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let pts: Vec<(f64, f64)> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| (i as f64 / span, (s - lo) / range))
        .collect();
    c.polyline(&pts, CURVE);
    c.img
}

pub fn write_roc(points: &[(f64, f64)], path: &Path) -> Result<()> {
    let img = roc_image(points, 320);
    Canvas { img }.save(path)
}

pub fn write_timeline(scores: &[f64], flags: &[bool], path: &Path) -> Result<()> {
    let img = timeline_image(scores, flags, 640, 200);
    Canvas { img }.save(path)
}

/// Writes `roc.png` and one `timeline_<clip>.png` per clip; returns the paths.
pub fn write_plots(
    series: &ScoreSeries,
    labels: &BTreeMap<String, GroundTruthLabels>,
    normalization: &str,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let (scores, flags) = aligned(series, labels, normalization)?;
    let mut written = Vec::new();
    let roc = dir.join("roc.png");
    write_roc(&roc_points(&scores, &flags), &roc)?;
    written.push(roc);
    let normalized = series.normalized(normalization)?;
    for (clip, values) in series.clips.iter().zip(&normalized) {
        let gt = labels.get(&clip.clip_id);
        let flags: Vec<bool> = clip
            .frame_indices
            .iter()
            .map(|&i| gt.and_then(|g| g.frame_flags.get(i).copied()).unwrap_or(false))
            .collect();
        let path = dir.join(format!("timeline_{}.png", clip.clip_id));
        write_timeline(values, &flags, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roc_draws_curve_and_diagonal() {
        let img = roc_image(&[(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)], 100);
        // Upper-left corner of the plot area lies on the curve.
        assert_eq!(*img.get_pixel(MARGIN, MARGIN + 5), CURVE);
        let plot = 100 - 1 - 2 * MARGIN;
        let x = MARGIN + plot / 2;
        assert_eq!(*img.get_pixel(x, MARGIN + plot - plot / 2), GUIDE);
    }

    #[test]
    fn timeline_shades_flagged_frames_only() {
        let flags = [false, false, true, true, false];
        let img = timeline_image(&[0.0, 0.0, 1.0, 1.0, 0.0], &flags, 200, 80);
        let row = 80 / 2;
        let col = |i: usize| MARGIN + ((i as f64 / 4.0) * (200 - 1 - 2 * MARGIN) as f64) as u32;
        assert_eq!(*img.get_pixel(col(2) + 2, row), SHADE);
        assert_eq!(*img.get_pixel(col(0) + 5, row), WHITE);
    }

    #[test]
    fn constant_scores_do_not_panic() {
        let img = timeline_image(&[3.0; 4], &[false; 4], 120, 60);
        assert_eq!(img.dimensions(), (120, 60));
    }
}
