use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::Deserialize;

use super::{Dataset, Frame, GroundTruthLabels, VideoClip};
use crate::error::{Error, Result};
use crate::registry::{Registry, Strategy};

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Resample every frame to `(width, height)`; keep native size when `None`.
    pub image_size: Option<(usize, usize)>,
    pub fps: f64,
    /// Skip the training split (scoring and evaluation only need the test split).
    pub skip_training: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            image_size: Some((256, 256)),
            fps: 25.0,
            skip_training: false,
        }
    }
}

pub trait DatasetLayout: Strategy {
    fn load(&self, root: &Path, opts: &LoadOptions) -> Result<Dataset>;

    /// Whether every test clip must ship flags and explanation labels.
    fn strict_labels(&self) -> bool;
}

/// Benchmark layout (UCSD Ped1/Ped2, CUHK Avenue after frame extraction).
/// Test labels and explanations are optional.
pub struct UcsdAvenueLayout;

impl Strategy for UcsdAvenueLayout {
    fn name(&self) -> &'static str {
        "ucsd_avenue"
    }

    fn describe(&self) -> &'static str {
        "pre-extracted benchmark frames; labels optional"
    }
}

impl DatasetLayout for UcsdAvenueLayout {
    fn load(&self, root: &Path, opts: &LoadOptions) -> Result<Dataset> {
        load_common(root, opts, false)
    }

    fn strict_labels(&self) -> bool {
        false
    }
}

/// Output of the synthetic generator; labels and explanations are mandatory.
pub struct SyntheticLayout;

impl Strategy for SyntheticLayout {
    fn name(&self) -> &'static str {
        "synthetic"
    }

    fn describe(&self) -> &'static str {
        "generated moving-shapes scenes with full ground truth"
    }
}

impl DatasetLayout for SyntheticLayout {
    fn load(&self, root: &Path, opts: &LoadOptions) -> Result<Dataset> {
        let mut opts = opts.clone();
        if let Ok(cfg) = super::synthetic::SyntheticConfig::load(&root.join(super::synthetic::CONFIG_FILE)) {
            opts.fps = cfg.fps;
        }
        load_common(root, &opts, true)
    }

    fn strict_labels(&self) -> bool {
        true
    }
}

pub fn registry() -> &'static Registry<dyn DatasetLayout> {
    static REG: OnceLock<Registry<dyn DatasetLayout>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut reg: Registry<dyn DatasetLayout> = Registry::new("dataset layout");
        reg.register(Box::new(UcsdAvenueLayout))
            .register(Box::new(SyntheticLayout));
        reg
    })
}

/// Loads both splits with the named layout. Clips are sorted by id.
pub fn load_dataset(root: &Path, layout: &str, opts: &LoadOptions) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Config(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    registry().get(layout)?.load(root, opts)
}

fn load_common(root: &Path, opts: &LoadOptions, strict_labels: bool) -> Result<Dataset> {
    let training = if opts.skip_training {
        Vec::new()
    } else {
        load_split(&root.join("training"), opts)?
    };
    let testing = load_split(&root.join("testing"), opts)?;
    let lengths: Vec<(String, usize)> = testing.iter().map(|c| (c.clip_id.clone(), c.len())).collect();
    let labels = read_labels(root, &lengths, strict_labels)?;
    Ok(Dataset {
        training,
        testing,
        labels,
    })
}

/// Ground truth of the test split without decoding any frame; clip lengths
/// come from the frame file counts.
pub fn load_labels(root: &Path, layout: &str) -> Result<BTreeMap<String, GroundTruthLabels>> {
    let strict = registry().get(layout)?.strict_labels();
    let frames_dir = root.join("testing").join("frames");
    if !frames_dir.is_dir() {
        return Err(Error::Config(format!("missing frame directory {}", frames_dir.display())));
    }
    let mut lengths = Vec::new();
    for dir in sorted_entries(&frames_dir)?.into_iter().filter(|p| p.is_dir()) {
        let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let n = sorted_entries(&dir)?.iter().filter(|p| is_image(p)).count();
        lengths.push((id, n));
    }
    read_labels(root, &lengths, strict)
}

fn read_labels(
    root: &Path,
    clips: &[(String, usize)],
    strict_labels: bool,
) -> Result<BTreeMap<String, GroundTruthLabels>> {
    let label_dir = root.join("testing").join("labels");
    let expl_dir = root.join("testing").join("explanations");
    let mut labels = BTreeMap::new();
    if !label_dir.is_dir() {
        if strict_labels {
            return Err(Error::Config(format!("missing label directory {}", label_dir.display())));
        }
        log::warn!("no test labels under {}", label_dir.display());
        return Ok(labels);
    }
    for (clip_id, len) in clips {
        let flags_path = label_dir.join(format!("{clip_id}.csv"));
        if !flags_path.is_file() {
            return Err(Error::load(clip_id, format!("missing label file {}", flags_path.display())));
        }
        let frame_flags = read_flags(&flags_path, clip_id, *len)?;
        let expl_path = expl_dir.join(format!("{clip_id}.jsonl"));
        let explanation_labels = if expl_path.is_file() {
            read_explanations(&expl_path, clip_id, *len)?
        } else if strict_labels {
            return Err(Error::load(clip_id, format!("missing explanations {}", expl_path.display())));
        } else {
            vec![BTreeSet::new(); *len]
        };
        for (t, set) in explanation_labels.iter().enumerate() {
            if !set.is_empty() && !frame_flags[t] {
                return Err(Error::load(
                    clip_id,
                    format!("frame {t} has explanation labels but no anomaly flag"),
                ));
            }
        }
        labels.insert(
            clip_id.clone(),
            GroundTruthLabels {
                frame_flags,
                explanation_labels,
            },
        );
    }
    Ok(labels)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn load_split(split: &Path, opts: &LoadOptions) -> Result<Vec<VideoClip>> {
    let frames_dir = split.join("frames");
    if !frames_dir.is_dir() {
        return Err(Error::Config(format!("missing frame directory {}", frames_dir.display())));
    }
    let mut clips = Vec::new();
    for dir in sorted_entries(&frames_dir)?.into_iter().filter(|p| p.is_dir()) {
        let clip_id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let frames = load_clip_frames(&dir, &clip_id, opts.image_size)?;
        clips.push(VideoClip {
            clip_id,
            frames,
            fps: opts.fps,
        });
    }
    Ok(clips)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn load_clip_frames(dir: &Path, clip_id: &str, size: Option<(usize, usize)>) -> Result<Vec<Frame>> {
    let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| is_image(p)).collect();
    if files.is_empty() {
        return Err(Error::load(clip_id, "no frames"));
    }
    // Numbered frames must be contiguous.
    let numbers: Option<Vec<u64>> = files
        .iter()
        .map(|p| p.file_stem()?.to_str()?.parse().ok())
        .collect();
    if let Some(mut numbers) = numbers {
        numbers.sort_unstable();
        for pair in numbers.windows(2) {
            if pair[1] != pair[0] + 1 {
                return Err(Error::load(clip_id, format!("missing frame {:06}", pair[0] + 1)));
            }
        }
    }
    let mut frames = Vec::with_capacity(files.len());
    for f in &files {
        let frame = Frame::load(f, size)?;
        if let Some(first) = frames.first() {
            let first: &Frame = first;
            if (first.width, first.height) != (frame.width, frame.height) {
                return Err(Error::load(clip_id, format!("frame {} has a different size", f.display())));
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

/// One `0`/`1` per line; blank lines ignored.
pub fn read_flags(path: &Path, clip_id: &str, len: usize) -> Result<Vec<bool>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut flags = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        flags.push(match line {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected 0 or 1, got '{other}'"),
                })
            }
        });
    }
    if flags.len() != len {
        return Err(Error::load(clip_id, format!("label length {} ≠ {}", flags.len(), len)));
    }
    Ok(flags)
}

#[derive(Deserialize)]
struct ExplanationLine {
    frame: usize,
    labels: Vec<String>,
}

pub fn read_explanations(path: &Path, clip_id: &str, len: usize) -> Result<Vec<BTreeSet<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = vec![BTreeSet::new(); len];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExplanationLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.frame >= len {
            return Err(Error::load(clip_id, format!("explanation for frame {} beyond clip length {len}", rec.frame)));
        }
        out[rec.frame].extend(rec.labels);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn write_clip(root: &Path, split: &str, id: &str, len: usize) {
        let dir = root.join(split).join("frames").join(id);
        fs::create_dir_all(&dir).unwrap();
        for t in 0..len {
            let img = image::GrayImage::from_pixel(8, 6, image::Luma([(t * 10) as u8]));
            img.save(dir.join(format!("{t:06}.png"))).unwrap();
        }
    }

    fn write_labels(root: &Path, id: &str, flags: &[u8]) {
        let dir = root.join("testing").join("labels");
        fs::create_dir_all(&dir).unwrap();
        let body: String = flags.iter().map(|f| format!("{f}\n")).collect();
        fs::write(dir.join(format!("{id}.csv")), body).unwrap();
    }

    #[test]
    fn ped2_shaped_layout_counts_clips() {
        let tmp = TempDir::new().unwrap();
        for i in 0..16 {
            write_clip(tmp.path(), "training", &format!("Train{:03}", i + 1), 2);
        }
        for i in 0..12 {
            let id = format!("Test{:03}", i + 1);
            write_clip(tmp.path(), "testing", &id, 2);
            write_labels(tmp.path(), &id, &[0, 1]);
        }
        let opts = LoadOptions {
            image_size: Some((4, 4)),
            ..LoadOptions::default()
        };
        let ds = load_dataset(tmp.path(), "ucsd_avenue", &opts).unwrap();
        assert_eq!(ds.training.len(), 16);
        assert_eq!(ds.testing.len(), 12);
        assert_eq!(ds.testing[0].clip_id, "Test001");
        // Grayscale replicated to three channels and resized.
        let f = &ds.testing[0].frames[1];
        assert_eq!((f.width, f.height, f.data.len()), (4, 4, 48));
        assert_eq!(f.data[0], f.data[16]);
    }

    #[test]
    fn empty_label_file_is_a_length_error() {
        let tmp = TempDir::new().unwrap();
        write_clip(tmp.path(), "training", "a", 3);
        write_clip(tmp.path(), "testing", "b", 7);
        write_labels(tmp.path(), "b", &[]);
        let err = load_dataset(tmp.path(), "ucsd_avenue", &LoadOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("label length 0 ≠ 7"), "{msg}");
        assert!(msg.contains("clip b"), "{msg}");
    }

    #[test]
    fn missing_frame_is_reported() {
        let tmp = TempDir::new().unwrap();
        write_clip(tmp.path(), "training", "a", 3);
        write_clip(tmp.path(), "testing", "b", 3);
        fs::remove_file(tmp.path().join("testing/frames/b/000001.png")).unwrap();
        let err = load_dataset(tmp.path(), "ucsd_avenue", &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("missing frame 000001"), "{err}");
    }

    #[test]
    fn explanation_without_flag_is_rejected() {
        let tmp = TempDir::new().unwrap();
        write_clip(tmp.path(), "training", "a", 2);
        write_clip(tmp.path(), "testing", "b", 2);
        write_labels(tmp.path(), "b", &[0, 0]);
        let dir = tmp.path().join("testing/explanations");
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("b.jsonl"), "{\"frame\": 1, \"labels\": [\"running\"]}\n").unwrap();
        let err = load_dataset(tmp.path(), "ucsd_avenue", &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("no anomaly flag"));
    }

    #[test]
    fn unknown_layout_is_a_config_error() {
        let tmp = TempDir::new().unwrap();
        let err = load_dataset(tmp.path(), "shanghaitech", &LoadOptions::default()).unwrap_err();
        assert_eq!(err.category(), "config");
    }
}
