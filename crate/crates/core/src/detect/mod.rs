//! Saliency maps, frame scores, score normalization and ROC-AUC.

mod heatmap;
mod normalize;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{make_windows, GroundTruthLabels, VideoClip};
use crate::error::{Error, Result};
use crate::model::{stack_windows, VqUNet};
use crate::tensor::{Real, Tensor};

pub use heatmap::{colormap, heatmap_image, write_heatmap, COLORMAP_STOPS};
pub use normalize::{registry, normalize, MinMaxPerVideo, NoNormalization, ScoreNormalizer};

/// Per-pixel squared prediction error summed over channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub clip_id: String,
    pub frame_index: usize,
    pub width: usize,
    pub height: usize,
    /// Row-major, `height × width`, all `≥ 0`.
    pub values: Vec<f64>,
}

impl SaliencyMap {
    /// `values[p] = Σ_c (predicted[c,p] − target[c,p])²` for channel-major
    /// `C × H × W` slices.
    pub fn from_pair<T: Real>(predicted: &[T], target: &[T], width: usize, height: usize) -> Result<Self> {
        let plane = width * height;
        if predicted.len() != target.len() || plane == 0 || predicted.len() % plane != 0 {
            return Err(Error::Shape(format!(
                "saliency of {} vs {} values over a {width}×{height} frame",
                predicted.len(),
                target.len()
            )));
        }
        let mut values = vec![0.0f64; plane];
        for (p, t) in predicted.chunks_exact(plane).zip(target.chunks_exact(plane)) {
            for ((v, &a), &b) in values.iter_mut().zip(p).zip(t) {
                let d = a.f64() - b.f64();
                *v += d * d;
            }
        }
        Ok(Self {
            clip_id: String::new(),
            frame_index: 0,
            width,
            height,
            values,
        })
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// One map per batch sample.
pub fn saliency<T: Real>(predicted: &Tensor<T>, target: &Tensor<T>) -> Result<Vec<SaliencyMap>> {
    if predicted.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "predicted {:?} vs target {:?}",
            predicted.shape(),
            target.shape()
        )));
    }
    (0..predicted.batch())
        .map(|b| SaliencyMap::from_pair(predicted.sample(b), target.sample(b), predicted.width(), predicted.height()))
        .collect()
}

/// Sum of the map over the whole frame.
pub fn frame_score(map: &SaliencyMap) -> f64 {
    map.values.iter().sum()
}

/// Raw scores of one clip, keyed by the index of the scored frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipScores {
    pub clip_id: String,
    pub frame_indices: Vec<usize>,
    pub raw: Vec<f64>,
}

impl ClipScores {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSeries {
    pub clips: Vec<ClipScores>,
}

impl ScoreSeries {
    pub fn frames(&self) -> usize {
        self.clips.iter().map(ClipScores::len).sum()
    }

    pub fn clip(&self, id: &str) -> Option<&ClipScores> {
        self.clips.iter().find(|c| c.clip_id == id)
    }

    /// Normalized scores per clip, in clip order.
    pub fn normalized(&self, normalization: &str) -> Result<Vec<Vec<f64>>> {
        let n = registry().get(normalization)?;
        Ok(self.clips.iter().map(|c| n.normalize(&c.raw)).collect())
    }

    /// Writes `<clip_id>.csv` per clip with columns
    /// `frame_index,raw_score,normalized_score`.
    pub fn write_csv_dir(&self, dir: &Path, normalization: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let normalized = self.normalized(normalization)?;
        for (clip, norm) in self.clips.iter().zip(normalized) {
            let path = dir.join(format!("{}.csv", clip.clip_id));
            let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
            w.write_record(["frame_index", "raw_score", "normalized_score"])
                .map_err(|e| csv_err(&path, e))?;
            for ((i, r), z) in clip.frame_indices.iter().zip(&clip.raw).zip(norm) {
                w.write_record([i.to_string(), r.to_string(), z.to_string()])
                    .map_err(|e| csv_err(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads every `*.csv` in `dir` written by [`ScoreSeries::write_csv_dir`],
    /// in clip-id order. Only raw scores are read back.
    pub fn read_csv_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        paths.sort();
        let mut clips = Vec::new();
        for path in paths {
            let clip_id = path.file_stem().unwrap().to_string_lossy().into_owned();
            let mut r = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
            let mut scores = ClipScores {
                clip_id,
                ..Default::default()
            };
            for (i, rec) in r.records().enumerate() {
                let rec = rec.map_err(|e| csv_err(&path, e))?;
                let parse = |col: usize| -> Result<&str> {
                    rec.get(col).ok_or_else(|| Error::Parse {
                        path: path.clone(),
                        line: i + 2,
                        message: format!("missing column {col}"),
                    })
                };
                let bad = |m: String| Error::Parse {
                    path: path.clone(),
                    line: i + 2,
                    message: m,
                };
                let idx: usize = parse(0)?.trim().parse().map_err(|e| bad(format!("frame_index: {e}")))?;
                let raw: f64 = parse(1)?.trim().parse().map_err(|e| bad(format!("raw_score: {e}")))?;
                if !raw.is_finite() || raw < 0.0 {
                    return Err(bad(format!("raw_score {raw} is not a finite non-negative number")));
                }
                scores.frame_indices.push(idx);
                scores.raw.push(raw);
            }
            clips.push(scores);
        }
        if clips.is_empty() {
            return Err(Error::Eval(format!("no score files in {}", dir.display())));
        }
        Ok(Self { clips })
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.position().map(|p| p.line() as usize).unwrap_or(0),
        message: e.to_string(),
    }
}

/// Scores every predictable frame of a clip. `on_map` sees each saliency map
/// (with its clip id and frame index set) together with the predicted frame.
pub fn score_clip<T: Real>(
    model: &VqUNet<T>,
    clip: &VideoClip,
    batch_size: usize,
    mut on_map: impl FnMut(&SaliencyMap, &[T]) -> Result<()>,
) -> Result<ClipScores> {
    let windows = make_windows(clip, model.config().n).windows;
    let mut out = ClipScores {
        clip_id: clip.clip_id.clone(),
        ..Default::default()
    };
    for chunk in windows.chunks(batch_size.max(1)) {
        let (inputs, targets) = stack_windows::<T>(chunk)?;
        let pred = model.infer(&inputs)?.predicted;
        if !pred.all_finite() {
            return Err(Error::NonFinite(format!("prediction for clip {}", clip.clip_id)));
        }
        for (b, (win, mut map)) in chunk.iter().zip(saliency(&pred, &targets)?).enumerate() {
            map.clip_id = clip.clip_id.clone();
            map.frame_index = win.target_index();
            on_map(&map, pred.sample(b))?;
            out.frame_indices.push(map.frame_index);
            out.raw.push(frame_score(&map));
        }
    }
    Ok(out)
}

pub fn score_clips<T: Real>(model: &VqUNet<T>, clips: &[VideoClip], batch_size: usize) -> Result<ScoreSeries> {
    let clips = clips
        .iter()
        .map(|c| score_clip(model, c, batch_size, |_, _| Ok(())))
        .collect::<Result<_>>()?;
    Ok(ScoreSeries { clips })
}

/// Mann–Whitney AUC, ties counted ½, via average ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Eval(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        let which = if pos == 0 { "no anomalous" } else { "no normal" };
        return Err(Error::Eval(format!(
            "AUC undefined: evaluation split has {which} frames ({} frames total)",
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC curve through every distinct threshold, from (0,0) to (1,1).
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    let pos = labels.iter().filter(|&&l| l).count().max(1) as f64;
    let neg = labels.iter().filter(|&&l| !l).count().max(1) as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        pts.push((fp / neg, tp / pos));
    }
    pts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub normalization: String,
    pub auc: f64,
    pub frames: usize,
    pub anomalous: usize,
}

/// Flattens normalized scores and their labels, aligned by frame index.
pub fn aligned(
    series: &ScoreSeries,
    labels: &BTreeMap<String, GroundTruthLabels>,
    normalization: &str,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let normalized = series.normalized(normalization)?;
    let mut s = Vec::with_capacity(series.frames());
    let mut l = Vec::with_capacity(series.frames());
    for (clip, norm) in series.clips.iter().zip(normalized) {
        let gt = labels
            .get(&clip.clip_id)
            .ok_or_else(|| Error::Eval(format!("no labels for clip {}", clip.clip_id)))?;
        for (&idx, z) in clip.frame_indices.iter().zip(norm) {
            let flag = gt.frame_flags.get(idx).ok_or_else(|| {
                Error::Eval(format!(
                    "clip {}: scored frame {idx} beyond {} labels",
                    clip.clip_id,
                    gt.frame_flags.len()
                ))
            })?;
            s.push(z);
            l.push(*flag);
        }
    }
    Ok((s, l))
}

pub fn evaluate_auc(
    series: &ScoreSeries,
    labels: &BTreeMap<String, GroundTruthLabels>,
    normalization: &str,
) -> Result<AucReport> {
    let (s, l) = aligned(series, labels, normalization)?;
    Ok(AucReport {
        normalization: normalization.to_string(),
        auc: auc(&s, &l)?,
        frames: l.len(),
        anomalous: l.iter().filter(|&&f| f).count(),
    })
}
