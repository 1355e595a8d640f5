use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExplanationRecord;
use crate::dataset::GroundTruthLabels;
use crate::error::{Error, Result};

/// Classes left out of the mean by default: location anomalies have no
/// object or action to point at.
pub const DEFAULT_EXCLUDED: &[&str] = &["anomalous location"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: String,
    pub ap: f64,
    /// Ground-truth frames carrying the class.
    pub support: usize,
    pub predictions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    /// Every ground-truth or predicted class, sorted by name.
    pub per_class: Vec<ClassAp>,
    /// Unweighted mean over classes with non-zero support.
    pub map: f64,
    pub excluded: Vec<String>,
}

impl MapReport {
    pub fn class(&self, name: &str) -> Option<&ClassAp> {
        self.per_class.iter().find(|c| c.class == name)
    }

    /// `class,ap,support,predictions` rows plus a `mAP` summary row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,ap,support,predictions\n");
        for c in &self.per_class {
            writeln!(s, "{},{},{},{}", quote(&c.class), c.ap, c.support, c.predictions).unwrap();
        }
        let support: usize = self.per_class.iter().map(|c| c.support).sum();
        let preds: usize = self.per_class.iter().map(|c| c.predictions).sum();
        writeln!(s, "mAP,{},{},{}", self.map, support, preds).unwrap();
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Area under the precision–recall curve, summed over every rank cutoff:
/// `Σ_k (R_k − R_{k−1}) · P_k`.
pub fn average_precision(ranked_hits: &[bool], support: usize) -> f64 {
    if support == 0 {
        return 0.0;
    }
    let (mut tp, mut prev_recall, mut ap) = (0usize, 0.0f64, 0.0f64);
    for (k, &hit) in ranked_hits.iter().enumerate() {
        tp += usize::from(hit);
        let recall = tp as f64 / support as f64;
        let precision = tp as f64 / (k + 1) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Per-class AP with frame-level matching. A class counts as emitted for a
/// frame when an entry with that label is flagged anomalous; each emission is
/// a prediction scored by its `box_score`. It is a true positive when the
/// frame's ground-truth set holds the class and that label has not already
/// been matched on the same frame.
pub fn evaluate_map(
    records: &[ExplanationRecord],
    ground_truth: &BTreeMap<String, GroundTruthLabels>,
    exclude: &[String],
) -> Result<MapReport> {
    let excluded: BTreeSet<&str> = exclude.iter().map(String::as_str).collect();
    let mut support: BTreeMap<String, usize> = BTreeMap::new();
    for gt in ground_truth.values() {
        for labels in &gt.explanation_labels {
            for l in labels.iter().filter(|l| !excluded.contains(l.as_str())) {
                *support.entry(l.clone()).or_default() += 1;
            }
        }
    }
    // (score, record order, entry order) keeps the ranking deterministic.
    let mut preds: BTreeMap<String, Vec<(f64, usize, usize)>> = BTreeMap::new();
    for (ri, r) in records.iter().enumerate() {
        let gt = ground_truth
            .get(&r.clip)
            .ok_or_else(|| Error::Eval(format!("no ground truth for clip {}", r.clip)))?;
        if r.frame >= gt.explanation_labels.len() {
            return Err(Error::Eval(format!(
                "clip {}: frame {} beyond {} labelled frames",
                r.clip,
                r.frame,
                gt.explanation_labels.len()
            )));
        }
        for (ei, e) in r.entries.iter().enumerate() {
            if e.anomalous && !excluded.contains(e.label.as_str()) {
                preds.entry(e.label.clone()).or_default().push((e.box_score, ri, ei));
            }
        }
    }
    if support.is_empty() {
        return Err(Error::Eval("ground truth holds no explanation labels to evaluate".into()));
    }
    let classes: BTreeSet<&String> = support.keys().chain(preds.keys()).collect();
    let mut per_class = Vec::with_capacity(classes.len());
    for class in classes {
        let mut p = preds.get(class).cloned().unwrap_or_default();
        p.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut consumed: BTreeSet<(&str, usize)> = BTreeSet::new();
        let hits: Vec<bool> = p
            .iter()
            .map(|&(_, ri, _)| {
                let r = &records[ri];
                let labelled = ground_truth[&r.clip].explanation_labels[r.frame].contains(class);
                labelled && consumed.insert((r.clip.as_str(), r.frame))
            })
            .collect();
        let s = support.get(class).copied().unwrap_or(0);
        per_class.push(ClassAp {
            class: class.clone(),
            ap: average_precision(&hits, s),
            support: s,
            predictions: p.len(),
        });
    }
    let scored: Vec<f64> = per_class.iter().filter(|c| c.support > 0).map(|c| c.ap).collect();
    Ok(MapReport {
        map: scored.iter().sum::<f64>() / scored.len() as f64,
        per_class,
        excluded: exclude.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::{ExplanationEntry, Source};
    use super::*;

    fn gt(labels: &[&[&str]]) -> BTreeMap<String, GroundTruthLabels> {
        let explanation_labels: Vec<BTreeSet<String>> = labels
            .iter()
            .map(|l| l.iter().map(|s| s.to_string()).collect())
            .collect();
        let frame_flags = explanation_labels.iter().map(|l| !l.is_empty()).collect();
        BTreeMap::from([(
            "c".to_string(),
            GroundTruthLabels {
                frame_flags,
                explanation_labels,
            },
        )])
    }

    fn rec(frame: usize, entries: &[(&str, f64, bool)]) -> ExplanationRecord {
        ExplanationRecord {
            clip: "c".into(),
            frame,
            frame_score: 0.0,
            entries: entries
                .iter()
                .map(|&(l, s, a)| ExplanationEntry {
                    bbox: [0.0, 0.0, 1.0, 1.0],
                    label: l.into(),
                    source: Source::Object,
                    confidence: 1.0,
                    box_score: s,
                    anomalous: a,
                })
                .collect(),
        }
    }

    #[test]
    fn single_correct_prediction() {
        let r = evaluate_map(&[rec(0, &[("bike", 2.0, true)])], &gt(&[&["bike"]]), &[]).unwrap();
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn predictions_only_on_unlabelled_frames() {
        let r = evaluate_map(&[rec(1, &[("bike", 2.0, true)])], &gt(&[&["bike"], &[]]), &[]).unwrap();
        assert_eq!(r.map, 0.0);
        let r = evaluate_map(&[rec(1, &[])], &gt(&[&["bike"], &[]]), &[]).unwrap();
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn duplicate_labels_on_a_frame_match_once() {
        let r = evaluate_map(
            &[rec(0, &[("bike", 3.0, true), ("bike", 2.0, true)])],
            &gt(&[&["bike"]]),
            &[],
        )
        .unwrap();
        let c = r.class("bike").unwrap();
        assert_eq!((c.predictions, c.ap), (2, 1.0));
    }

    #[test]
    fn prediction_only_class_is_listed_but_not_averaged() {
        let r = evaluate_map(
            &[rec(0, &[("bike", 3.0, true), ("car", 5.0, true)])],
            &gt(&[&["bike"]]),
            &[],
        )
        .unwrap();
        assert_eq!(r.class("car").unwrap().support, 0);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn excluded_classes_are_dropped() {
        let labels = gt(&[&["anomalous location"], &["bike"]]);
        let ex = vec!["anomalous location".to_string()];
        let r = evaluate_map(&[rec(1, &[("bike", 1.0, true)])], &labels, &ex).unwrap();
        assert!(r.class("anomalous location").is_none());
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn unknown_clip_is_an_error() {
        let mut r = rec(0, &[]);
        r.clip = "zz".into();
        assert_eq!(evaluate_map(&[r], &gt(&[&["a"]]), &[]).unwrap_err().category(), "eval");
    }

    #[test]
    fn ap_of_interleaved_ranking() {
        // hits at ranks 1 and 3 of 2 positives: (1·1 + 1·2/3) / 2
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn csv_has_summary_row() {
        let r = evaluate_map(&[rec(0, &[("a,b", 1.0, true)])], &gt(&[&["a,b"]]), &[]).unwrap();
        let csv = r.to_csv();
        assert!(csv.contains("\"a,b\",1,1,1"));
        assert!(csv.trim_end().ends_with("mAP,1,1,1"));
    }
}
