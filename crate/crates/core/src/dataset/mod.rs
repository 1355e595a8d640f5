//! Video clips, ground truth, sliding input windows and dataset loading.
//!
//! On-disk layout shared by every loader:
//!
//! ```text
//! root/{training,testing}/frames/<clip_id>/<%06d>.{png,jpg}
//! root/testing/labels/<clip_id>.csv           one 0/1 flag per line
//! root/testing/explanations/<clip_id>.jsonl   {"frame": int, "labels": [..]}
//! ```

mod layout;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

pub use layout::{load_dataset, load_labels, registry, DatasetLayout, LoadOptions, SyntheticLayout, UcsdAvenueLayout};

/// Channels per frame; grayscale sources are replicated.
pub const CHANNELS: usize = 3;

/// `[0, 255] → [-1, 1]`.
pub fn normalize(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn denormalize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// One RGB frame, channel-major (`C × H × W`), values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn from_rgb(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; CHANNELS * w * h];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..CHANNELS {
                data[(c * h + y as usize) * w + x as usize] = normalize(px[c]);
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }

    pub fn to_rgb(&self) -> image::RgbImage {
        let (w, h) = (self.width, self.height);
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let at = |c: usize| denormalize(self.data[(c * h + y as usize) * w + x as usize]);
            image::Rgb([at(0), at(1), at(2)])
        })
    }

    /// Reads an image, converting to RGB and resampling bilinearly to `size` when given.
    pub fn load(path: &Path, size: Option<(usize, usize)>) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let mut rgb = img.to_rgb8();
        if let Some((w, h)) = size {
            if (rgb.width() as usize, rgb.height() as usize) != (w, h) {
                rgb = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
            }
        }
        Ok(Self::from_rgb(&rgb))
    }
}

#[derive(Clone, Debug)]
pub struct VideoClip {
    pub clip_id: String,
    pub frames: Vec<Frame>,
    /// Metadata only.
    pub fps: f64,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_size(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.width, f.height))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLabels {
    pub frame_flags: Vec<bool>,
    /// Per-frame explanation classes; empty sets for unlabelled frames.
    pub explanation_labels: Vec<BTreeSet<String>>,
}

impl GroundTruthLabels {
    pub fn anomalous_frames(&self) -> usize {
        self.frame_flags.iter().filter(|&&f| f).count()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub training: Vec<VideoClip>,
    pub testing: Vec<VideoClip>,
    /// Test-split ground truth keyed by clip id.
    pub labels: BTreeMap<String, GroundTruthLabels>,
}

impl Dataset {
    pub fn test_clip(&self, id: &str) -> Option<&VideoClip> {
        self.testing.iter().find(|c| c.clip_id == id)
    }
}

/// `n` consecutive frames of one clip plus the frame that follows them.
/// With `n = 0` (reconstruction) the input is the target itself.
#[derive(Clone, Copy, Debug)]
pub struct FrameWindow<'a> {
    pub clip: &'a VideoClip,
    pub t0: usize,
    pub n: usize,
}

impl<'a> FrameWindow<'a> {
    pub fn clip_id(&self) -> &'a str {
        &self.clip.clip_id
    }

    pub fn target_index(&self) -> usize {
        self.t0 + self.n
    }

    pub fn target(&self) -> &'a Frame {
        &self.clip.frames[self.target_index()]
    }

    /// Input frames in temporal order.
    pub fn input_frames(&self) -> &'a [Frame] {
        if self.n == 0 {
            std::slice::from_ref(self.target())
        } else {
            &self.clip.frames[self.t0..self.t0 + self.n]
        }
    }

    pub fn input_channels(&self) -> usize {
        self.n.max(1) * CHANNELS
    }

    /// Writes the channel-wise concatenation of the input frames into `dst`.
    pub fn write_inputs<T: Real>(&self, dst: &mut [T]) {
        let mut off = 0;
        for f in self.input_frames() {
            for (d, &v) in dst[off..off + f.data.len()].iter_mut().zip(&f.data) {
                *d = T::of(v as f64);
            }
            off += f.data.len();
        }
        debug_assert_eq!(off, dst.len());
    }

    pub fn write_target<T: Real>(&self, dst: &mut [T]) {
        for (d, &v) in dst.iter_mut().zip(&self.target().data) {
            *d = T::of(v as f64);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Windows<'a> {
    pub windows: Vec<FrameWindow<'a>>,
    /// Set when the clip was too short to yield any window.
    pub warning: Option<String>,
}

/// Stride-1 windows over a clip: `len − n` of them (`len` when `n = 0`).
pub fn make_windows(clip: &VideoClip, n: usize) -> Windows<'_> {
    let needed = n + 1;
    if clip.len() < needed {
        let warning = format!(
            "clip {} has {} frames; {} needed for n={}",
            clip.clip_id,
            clip.len(),
            needed,
            n
        );
        log::warn!("{warning}");
        return Windows {
            windows: Vec::new(),
            warning: Some(warning),
        };
    }
    let windows = (0..clip.len() - n)
        .map(|t0| FrameWindow { clip, t0, n })
        .collect();
    Windows {
        windows,
        warning: None,
    }
}

/// Windows over every clip, in clip order.
pub fn windows_for<'a>(clips: &'a [VideoClip], n: usize) -> Vec<FrameWindow<'a>> {
    clips.iter().flat_map(|c| make_windows(c, n).windows).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_clip(id: &str, len: usize) -> VideoClip {
        let frames = (0..len)
            .map(|t| Frame {
                width: 2,
                height: 2,
                data: vec![t as f32 / 100.0; CHANNELS * 4],
            })
            .collect();
        VideoClip {
            clip_id: id.into(),
            frames,
            fps: 25.0,
        }
    }

    #[test]
    fn single_window_targets_last_frame() {
        let clip = toy_clip("a", 6);
        let w = make_windows(&clip, 5);
        assert_eq!(w.windows.len(), 1);
        assert_eq!(w.windows[0].target_index(), 5);
        assert_eq!(w.windows[0].target(), &clip.frames[5]);
    }

    #[test]
    fn reconstruction_windows_equal_targets() {
        let clip = toy_clip("a", 6);
        let w = make_windows(&clip, 0).windows;
        assert_eq!(w.len(), 6);
        for win in &w {
            assert_eq!(win.input_frames(), std::slice::from_ref(win.target()));
            assert_eq!(win.input_channels(), CHANNELS);
        }
    }

    #[test]
    fn window_count_is_len_minus_n() {
        let clip = toy_clip("a", 100);
        let w = make_windows(&clip, 5).windows;
        assert_eq!(w.len(), 95);
        for win in &w {
            assert_eq!(win.target(), &clip.frames[win.t0 + 5]);
        }
    }

    #[test]
    fn short_clip_yields_warning() {
        let clip = toy_clip("a", 3);
        let w = make_windows(&clip, 5);
        assert!(w.windows.is_empty());
        assert!(w.warning.unwrap().contains("clip a"));
    }

    #[test]
    fn inputs_are_concatenated_in_time_order() {
        let clip = toy_clip("a", 4);
        let w = make_windows(&clip, 2).windows[1];
        let mut buf = vec![0.0f32; w.input_channels() * 4];
        w.write_inputs(&mut buf);
        assert_eq!(buf[0], 0.01);
        assert_eq!(buf[CHANNELS * 4], 0.02);
    }

    #[test]
    fn normalization_round_trip_is_exact_for_8_bit() {
        for v in 0..=255u8 {
            assert_eq!(denormalize(normalize(v)), v);
        }
        assert_eq!(normalize(0), -1.0);
        assert_eq!(normalize(255), 1.0);
    }
}
