use std::path::Path;

use super::SaliencyMap;
use crate::error::{Error, Result};

/// Colormap stops from zero error (dark blue) through teal to the maximum
/// (light green), linearly interpolated in RGB.
pub const COLORMAP_STOPS: [[u8; 3]; 3] = [[12, 20, 92], [28, 140, 150], [196, 246, 170]];

/// Color for `t` in `[0, 1]`; values outside are clamped.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let seg = (t * 2.0).min(1.999_999);
    let i = seg as usize;
    let f = seg - i as f64;
    let (a, b) = (COLORMAP_STOPS[i], COLORMAP_STOPS[i + 1]);
    std::array::from_fn(|c| (a[c] as f64 + f * (b[c] as f64 - a[c] as f64)).round() as u8)
}

/// Renders a map scaled by `max` (the map's own maximum when `None`).
pub fn heatmap_image(map: &SaliencyMap, max: Option<f64>) -> image::RgbImage {
    let scale = max.unwrap_or_else(|| map.max());
    image::RgbImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        let v = map.at(x as usize, y as usize);
        let t = if scale > 0.0 { v / scale } else { 0.0 };
        image::Rgb(colormap(t))
    })
}

pub fn write_heatmap(map: &SaliencyMap, max: Option<f64>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    heatmap_image(map, max)
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}
