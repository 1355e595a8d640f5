//! External object/action detections in the JSON-lines interchange format:
//!
//! ```text
//! {"clip": str, "frame": int, "boxes": [{"box": [x1,y1,x2,y2], "label": str, "score": float, "source": "object"|"action"}]}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Object,
    Action,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub label: String,
    /// Detector confidence in `[0, 1]`; kept for analysis, not used for ranking.
    #[serde(rename = "score")]
    pub confidence: f64,
    pub source: Source,
}

impl Detection {
    pub fn width(&self) -> f64 {
        self.bbox[2] - self.bbox[0]
    }

    pub fn height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameDetections {
    pub clip: String,
    pub frame: usize,
    pub boxes: Vec<Detection>,
}

/// Detections for many frames, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionSet {
    pub frames: Vec<FrameDetections>,
    index: BTreeMap<(String, usize), usize>,
}

fn validate(d: &Detection) -> std::result::Result<(), String> {
    let [x1, y1, x2, y2] = d.bbox;
    if !d.bbox.iter().all(|v| v.is_finite()) {
        return Err("box has non-finite coordinates".into());
    }
    if !(x1 < x2 && y1 < y2) {
        return Err(format!("degenerate box [{x1}, {y1}, {x2}, {y2}] (need x1<x2, y1<y2)"));
    }
    if d.label.trim().is_empty() {
        return Err("empty label".into());
    }
    if !(0.0..=1.0).contains(&d.confidence) {
        return Err(format!("score {} outside [0, 1]", d.confidence));
    }
    Ok(())
}

impl DetectionSet {
    pub fn from_frames(frames: Vec<FrameDetections>) -> Result<Self> {
        let mut set = Self::default();
        for f in frames {
            for d in &f.boxes {
                validate(d).map_err(|m| Error::load(&f.clip, format!("frame {}: {m}", f.frame)))?;
            }
            set.push(f);
        }
        Ok(set)
    }

    fn push(&mut self, f: FrameDetections) {
        match self.index.get(&(f.clip.clone(), f.frame)) {
            // Repeated records for one frame are merged in file order.
            Some(&i) => self.frames[i].boxes.extend(f.boxes),
            None => {
                self.index.insert((f.clip.clone(), f.frame), self.frames.len());
                self.frames.push(f);
            }
        }
    }

    /// Parses a JSON-lines file. Blank lines are skipped; any malformed record
    /// fails with its line number.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut set = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let rec: FrameDetections = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            for d in &rec.boxes {
                validate(d).map_err(err)?;
            }
            set.push(rec);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn boxes(&self) -> usize {
        self.frames.iter().map(|f| f.boxes.len()).sum()
    }

    pub fn get(&self, clip: &str, frame: usize) -> &[Detection] {
        self.index
            .get(&(clip.to_string(), frame))
            .map(|&i| self.frames[i].boxes.as_slice())
            .unwrap_or(&[])
    }

    /// Maps coordinates from a `from` frame size to a `to` frame size.
    pub fn rescale(&mut self, from: (usize, usize), to: (usize, usize)) {
        let sx = to.0 as f64 / from.0 as f64;
        let sy = to.1 as f64 / from.1 as f64;
        for d in self.frames.iter_mut().flat_map(|f| f.boxes.iter_mut()) {
            d.bbox = [d.bbox[0] * sx, d.bbox[1] * sy, d.bbox[2] * sx, d.bbox[3] * sy];
        }
    }

    /// Clips every box to `[0, width] × [0, height]`. Boxes left with no
    /// area are dropped; returns how many.
    pub fn clip_to(&mut self, width: usize, height: usize) -> usize {
        let (w, h) = (width as f64, height as f64);
        let mut dropped = 0;
        for f in &mut self.frames {
            f.boxes.retain_mut(|d| {
                let [x1, y1, x2, y2] = d.bbox;
                d.bbox = [x1.clamp(0.0, w), y1.clamp(0.0, h), x2.clamp(0.0, w), y2.clamp(0.0, h)];
                let keep = d.width() > 0.0 && d.height() > 0.0;
                dropped += usize::from(!keep);
                keep
            });
        }
        dropped
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for f in &self.frames {
            out.push_str(&serde_json::to_string(f).expect("detections serialize"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}
