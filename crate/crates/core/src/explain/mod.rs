//! Box-level explanations from saliency maps and external detections, and
//! per-class average precision against frame-level explanation labels.
//!
//! A pixel `(x, y)` belongs to a box when its center `(x + ½, y + ½)` lies in
//! `[x1, x2) × [y1, y2)`, so boxes sharing an edge partition pixels exactly.

mod detections;
mod map;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::detect::{frame_score, score_clip, SaliencyMap};
use crate::error::{Error, Result};
use crate::model::VqUNet;
use crate::registry::{Registry, Strategy};
use crate::dataset::VideoClip;
use crate::tensor::Real;

pub use detections::{Detection, DetectionSet, FrameDetections, Source};
pub use map::{average_precision, evaluate_map, ClassAp, MapReport, DEFAULT_EXCLUDED};

/// Turns the heat inside a box into its score.
pub trait BoxAggregator: Strategy {
    fn aggregate(&self, sum: f64, pixels: usize) -> f64;
}

pub struct SumAggregator;

impl Strategy for SumAggregator {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn describe(&self) -> &'static str {
        "total saliency inside the box"
    }
}

impl BoxAggregator for SumAggregator {
    fn aggregate(&self, sum: f64, _pixels: usize) -> f64 {
        sum
    }
}

pub struct MeanAggregator;

impl Strategy for MeanAggregator {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn describe(&self) -> &'static str {
        "total saliency divided by the number of pixels in the box"
    }
}

impl BoxAggregator for MeanAggregator {
    fn aggregate(&self, sum: f64, pixels: usize) -> f64 {
        if pixels == 0 {
            0.0
        } else {
            sum / pixels as f64
        }
    }
}

pub fn registry() -> &'static Registry<dyn BoxAggregator> {
    static REG: OnceLock<Registry<dyn BoxAggregator>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut reg: Registry<dyn BoxAggregator> = Registry::new("box aggregation");
        reg.register(Box::new(SumAggregator)).register(Box::new(MeanAggregator));
        reg
    })
}

/// Pixel index range `[start, end)` whose centers fall in `[lo, hi)`.
fn pixel_span(lo: f64, hi: f64, limit: usize) -> (usize, usize) {
    let clamp = |v: f64| v.clamp(0.0, limit as f64) as usize;
    (clamp((lo - 0.5).ceil()), clamp((hi - 0.5).ceil()))
}

/// Sum of the map over pixels inside the box, and their count.
pub fn box_heat(map: &SaliencyMap, bbox: &[f64; 4]) -> (f64, usize) {
    let (x0, x1) = pixel_span(bbox[0], bbox[2], map.width);
    let (y0, y1) = pixel_span(bbox[1], bbox[3], map.height);
    let mut sum = 0.0;
    for y in y0..y1 {
        for &v in &map.values[y * map.width + x0..y * map.width + x1.max(x0)] {
            sum += v;
        }
    }
    (sum, x1.saturating_sub(x0) * y1.saturating_sub(y0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationEntry {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub label: String,
    pub source: Source,
    pub confidence: f64,
    pub box_score: f64,
    pub anomalous: bool,
}

/// Ranked explanation of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub clip: String,
    pub frame: usize,
    pub frame_score: f64,
    /// Sorted by `box_score`, descending; ties keep detection order.
    pub entries: Vec<ExplanationEntry>,
}

pub fn box_scores(map: &SaliencyMap, detections: &[Detection], aggregator: &dyn BoxAggregator) -> Vec<f64> {
    detections
        .iter()
        .map(|d| {
            let (sum, n) = box_heat(map, &d.bbox);
            aggregator.aggregate(sum, n)
        })
        .collect()
}

/// Scores and ranks the boxes of one frame; entries at or above
/// `threshold` are flagged anomalous.
pub fn explain_frame(
    map: &SaliencyMap,
    detections: &[Detection],
    threshold: f64,
    aggregator: &dyn BoxAggregator,
) -> ExplanationRecord {
    let scores = box_scores(map, detections, aggregator);
    let mut entries: Vec<ExplanationEntry> = detections
        .iter()
        .zip(scores)
        .map(|(d, s)| ExplanationEntry {
            bbox: d.bbox,
            label: d.label.clone(),
            source: d.source,
            confidence: d.confidence,
            box_score: s,
            anomalous: s >= threshold,
        })
        .collect();
    entries.sort_by(|a, b| b.box_score.total_cmp(&a.box_score));
    ExplanationRecord {
        clip: map.clip_id.clone(),
        frame: map.frame_index,
        frame_score: frame_score(map),
        entries,
    }
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of the values.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Eval("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::Config(format!("percentile {q} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// How the anomaly threshold on box scores is chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Absolute(f64),
    /// Percentile of box scores on a normal-only calibration split.
    Percentile(f64),
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Percentile(99.0)
    }
}

/// Box scores of every detection over the given (normal) clips.
pub fn calibration_scores<T: Real>(
    model: &VqUNet<T>,
    clips: &[VideoClip],
    detections: &DetectionSet,
    aggregator: &dyn BoxAggregator,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut scores = Vec::new();
    for clip in clips {
        score_clip(model, clip, batch_size, |map, _| {
            scores.extend(box_scores(map, detections.get(&clip.clip_id, map.frame_index), aggregator));
            Ok(())
        })?;
    }
    Ok(scores)
}

/// Label rewrite table applied to detector labels before evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelAliases(pub BTreeMap<String, String>);

impl LabelAliases {
    /// Reads `from,to` lines (a `from,to` header line is allowed).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (i == 0 && line == "from,to") {
                continue;
            }
            let (from, to) = line.split_once(',').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected `from,to`".into(),
            })?;
            map.insert(from.trim().to_string(), to.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn apply<'a>(&'a self, label: &'a str) -> &'a str {
        self.0.get(label).map(String::as_str).unwrap_or(label)
    }

    pub fn apply_records(&self, records: &mut [ExplanationRecord]) {
        for e in records.iter_mut().flat_map(|r| r.entries.iter_mut()) {
            if let Some(to) = self.0.get(&e.label) {
                e.label = to.clone();
            }
        }
    }
}

/// Explains every scored frame of the clips. `on_map` additionally sees each
/// saliency map (for heatmap output).
pub fn explain_clips<T: Real>(
    model: &VqUNet<T>,
    clips: &[VideoClip],
    detections: &DetectionSet,
    threshold: f64,
    aggregator: &dyn BoxAggregator,
    batch_size: usize,
    mut on_map: impl FnMut(&SaliencyMap) -> Result<()>,
) -> Result<Vec<ExplanationRecord>> {
    let mut records = Vec::new();
    for clip in clips {
        score_clip(model, clip, batch_size, |map, _| {
            on_map(map)?;
            records.push(explain_frame(
                map,
                detections.get(&clip.clip_id, map.frame_index),
                threshold,
                aggregator,
            ));
            Ok(())
        })?;
    }
    Ok(records)
}

/// Writes one `<clip>.jsonl` per clip into `dir`.
pub fn write_records(dir: &Path, records: &[ExplanationRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut by_clip: BTreeMap<&str, String> = BTreeMap::new();
    for r in records {
        let s = by_clip.entry(&r.clip).or_default();
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    for (clip, text) in by_clip {
        let p = dir.join(format!("{clip}.jsonl"));
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Reads every `*.jsonl` in `dir`, in file-name order.
pub fn read_records(dir: &Path) -> Result<Vec<ExplanationRecord>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: ExplanationRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: p.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if r.entries.windows(2).any(|w| w[0].box_score < w[1].box_score) {
                return Err(Error::Parse {
                    path: p.clone(),
                    line: i + 1,
                    message: "entries not sorted by box_score".into(),
                });
            }
            out.push(r);
        }
    }
    Ok(out)
}
