//! Deterministic moving-shapes scenes with injected anomalies.
//!
//! One flat static scene: grass with a horizontal walkway. Normal entities
//! are light gray squares walking along it. In test clips a scheduled
//! anomaly takes over one of the walkers for its segment, so the number of
//! objects on screen never changes. Anomalies come from an
//! [`AnomalyInjector`]:
//!
//! * `novel_shape`: the walker turns into an orange disc (object anomaly, label `cart`)
//! * `fast_mover`: the walker speeds up 3× (action anomaly, label `running`)
//! * `forbidden_region`: the walker moves onto grass no one visits during
//!   training (location anomaly, label `anomalous location`)
//!
//! Besides frames and ground truth the generator writes an oracle
//! `detections.jsonl` per split in the detection interchange format, so the
//! explanation pipeline can run end to end without external detectors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::registry::{Registry, Strategy};

pub const CONFIG_FILE: &str = "synthetic.toml";
pub const DETECTIONS_FILE: &str = "detections.jsonl";

/// Speed multiplier of the fast mover relative to normal entities.
pub const FAST_FACTOR: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySpec {
    /// Registered injector name.
    pub kind: String,
    /// Test clip index (0-based).
    pub clip: usize,
    pub start: usize,
    /// Number of frames; every one of them is flagged.
    pub length: usize,
    /// `[x1, y1, x2, y2]` in pixels, required by `forbidden_region`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<[usize; 4]>,
}

/// Generator configuration (TOML). Pixel quantities refer to the output size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub train_clips: usize,
    pub test_clips: usize,
    pub clip_len: usize,
    pub fps: f64,
    /// Walkers per clip. Each leaves at a frame edge and re-enters later.
    pub entities: usize,
    /// Side of a normal entity, pixels.
    pub entity_size: usize,
    /// Normal walking speed, pixels per frame.
    pub speed: f64,
    /// `[top, bottom)` rows of the walkway.
    pub walkway: [usize; 2],
    pub anomalies: Vec<AnomalySpec>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self::for_size(128, 128)
    }
}

impl SyntheticConfig {
    /// Proportional defaults for a frame size, with one anomaly segment per
    /// test clip cycling through the built-in kinds.
    pub fn for_size(width: usize, height: usize) -> Self {
        let entity_size = (width.min(height) / 12).max(3);
        let test_clips = 12;
        let clip_len = 60;
        let kinds = ["novel_shape", "fast_mover", "forbidden_region"];
        let region = [0, height / 16, width, height * 5 / 16];
        let anomalies = (0..test_clips)
            .map(|clip| {
                let kind = kinds[clip % kinds.len()];
                AnomalySpec {
                    kind: kind.to_string(),
                    clip,
                    start: clip_len / 3,
                    length: clip_len / 3,
                    region: (kind == "forbidden_region").then_some(region),
                }
            })
            .collect();
        Self {
            width,
            height,
            train_clips: 6,
            test_clips,
            clip_len,
            fps: 25.0,
            entities: 3,
            entity_size,
            speed: (width as f64 / 64.0).max(1.0),
            walkway: [height * 7 / 16, height * 13 / 16],
            anomalies,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width < 16 || self.height < 16 {
            return bad(format!("frame size {}×{} below 16×16", self.width, self.height));
        }
        if self.clip_len == 0 || self.test_clips == 0 {
            return bad("clip_len and test_clips must be positive".into());
        }
        if !(self.fps > 0.0) || !(self.speed > 0.0) {
            return bad("fps and speed must be positive".into());
        }
        let [top, bottom] = self.walkway;
        if top >= bottom || bottom > self.height {
            return bad(format!("walkway {:?} outside frame height {}", self.walkway, self.height));
        }
        if self.entity_size == 0 || self.entity_size * 2 > bottom - top || self.entity_size * 2 > self.width {
            return bad(format!("entity_size {} does not fit the walkway", self.entity_size));
        }
        for (i, a) in self.anomalies.iter().enumerate() {
            let injector = registry().get(&a.kind)?;
            if a.clip >= self.test_clips {
                return bad(format!("anomaly {i}: clip {} ≥ test_clips {}", a.clip, self.test_clips));
            }
            if a.length == 0 || a.start + a.length > self.clip_len {
                return bad(format!(
                    "anomaly {i}: frames {}..{} outside clip of {}",
                    a.start,
                    a.start + a.length,
                    self.clip_len
                ));
            }
            match a.region {
                Some([x1, y1, x2, y2]) => {
                    if x1 >= x2 || y1 >= y2 || x2 > self.width || y2 > self.height {
                        return bad(format!("anomaly {i}: anomaly region outside frame bounds {:?}", a.region.unwrap()));
                    }
                    if x2 - x1 < self.entity_size || y2 - y1 < self.entity_size {
                        return bad(format!("anomaly {i}: region smaller than an entity"));
                    }
                }
                None if injector.needs_region() => {
                    return bad(format!("anomaly {i}: {} needs a region", a.kind));
                }
                None => {}
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disc,
}

/// A moving sprite. Anomalies bounce inside `x_range`; walkers pass
/// through the frame edges and leave.
#[derive(Clone, Debug)]
pub struct Entity {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub size: usize,
    pub shape: Shape,
    pub color: [u8; 3],
    pub x_range: (f64, f64),
    pub object_label: &'static str,
    pub action_label: Option<&'static str>,
}

impl Entity {
    fn step(&mut self) {
        self.x += self.vx;
        let (lo, hi) = self.x_range;
        if self.x < lo {
            self.x = 2.0 * lo - self.x;
            self.vx = -self.vx;
        } else if self.x > hi {
            self.x = 2.0 * hi - self.x;
            self.vx = -self.vx;
        }
        self.x = self.x.clamp(lo, hi);
    }

    fn left(&self) -> i64 {
        self.x.round() as i64
    }

    fn visible(&self, width: usize) -> bool {
        let x = self.left();
        x < width as i64 && x + self.size as i64 > 0
    }

    /// Box clipped to the frame, `None` once fully outside.
    fn bbox(&self, width: usize) -> Option<[usize; 4]> {
        if !self.visible(width) {
            return None;
        }
        let x = self.left();
        let y = self.y.round() as usize;
        let x1 = x.max(0) as usize;
        let x2 = ((x + self.size as i64) as usize).min(width);
        Some([x1, y, x2, y + self.size])
    }

    fn draw(&self, img: &mut image::RgbImage) {
        let Some([x1, y1, x2, y2]) = self.bbox(img.width() as usize) else {
            return;
        };
        let r = self.size as f64 / 2.0;
        let (cx, cy) = (self.left() as f64 + r, y1 as f64 + r);
        for y in y1..y2.min(img.height() as usize) {
            for x in x1..x2 {
                let inside = match self.shape {
                    Shape::Square => true,
                    Shape::Disc => {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        dx * dx + dy * dy <= r * r
                    }
                };
                if inside {
                    img.put_pixel(x as u32, y as u32, image::Rgb(self.color));
                }
            }
        }
    }
}

fn walker(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng, rows: (usize, usize), speed: f64) -> Entity {
    let size = cfg.entity_size;
    let hi = (cfg.width - size) as f64;
    let y_hi = rows.1.saturating_sub(size).max(rows.0);
    let shade = rng.random_range(190u8..=215);
    Entity {
        x: rng.random_range(0.0..=hi).round(),
        y: rng.random_range(rows.0..=y_hi) as f64,
        vx: if rng.random_bool(0.5) { speed } else { -speed },
        size,
        shape: Shape::Square,
        color: [shade, shade, shade],
        x_range: (0.0, hi),
        object_label: "person",
        action_label: Some("walking"),
    }
}

pub trait AnomalyInjector: Strategy {
    /// Ground-truth explanation class written for flagged frames.
    fn explanation_label(&self) -> &'static str;

    fn needs_region(&self) -> bool {
        false
    }

    /// Entity shown for the segment. `host` is the walker being replaced,
    /// absent when the scene has no walkers.
    fn spawn(&self, spec: &AnomalySpec, cfg: &SyntheticConfig, host: Option<&Entity>, rng: &mut ChaCha8Rng) -> Entity;
}

fn host_or_new(cfg: &SyntheticConfig, host: Option<&Entity>, rng: &mut ChaCha8Rng) -> Entity {
    match host {
        Some(h) => h.clone(),
        None => walker(cfg, rng, (cfg.walkway[0], cfg.walkway[1]), cfg.speed),
    }
}

pub struct NovelShape;

impl Strategy for NovelShape {
    fn name(&self) -> &'static str {
        "novel_shape"
    }
    fn describe(&self) -> &'static str {
        "orange disc never seen in training (object anomaly)"
    }
}

impl AnomalyInjector for NovelShape {
    fn explanation_label(&self) -> &'static str {
        "cart"
    }

    fn spawn(&self, _spec: &AnomalySpec, cfg: &SyntheticConfig, host: Option<&Entity>, rng: &mut ChaCha8Rng) -> Entity {
        let mut e = host_or_new(cfg, host, rng);
        // Roughly the square's area, so the frame's overall energy stays put.
        let size = (cfg.entity_size as f64 * 1.3).round() as usize;
        let size = size.min(cfg.walkway[1] - cfg.walkway[0]);
        let grow = (size - e.size) as f64 / 2.0;
        e.size = size;
        e.y = (e.y - grow).round().clamp(cfg.walkway[0] as f64, (cfg.walkway[1] - size) as f64);
        e.x_range = (0.0, (cfg.width - size) as f64);
        e.x = (e.x - grow).round().clamp(0.0, e.x_range.1);
        e.shape = Shape::Disc;
        e.color = [228, 112, 78];
        e.object_label = "cart";
        e.action_label = None;
        e
    }
}

pub struct FastMover;

impl Strategy for FastMover {
    fn name(&self) -> &'static str {
        "fast_mover"
    }
    fn describe(&self) -> &'static str {
        "normal-looking walker at 3x speed (action anomaly)"
    }
}

impl AnomalyInjector for FastMover {
    fn explanation_label(&self) -> &'static str {
        "running"
    }

    fn spawn(&self, _spec: &AnomalySpec, cfg: &SyntheticConfig, host: Option<&Entity>, rng: &mut ChaCha8Rng) -> Entity {
        let mut e = host_or_new(cfg, host, rng);
        e.vx *= FAST_FACTOR;
        e.action_label = Some("running");
        e
    }
}

pub struct ForbiddenRegion;

impl Strategy for ForbiddenRegion {
    fn name(&self) -> &'static str {
        "forbidden_region"
    }
    fn describe(&self) -> &'static str {
        "normal walker inside a region never visited in training (location anomaly)"
    }
}

impl AnomalyInjector for ForbiddenRegion {
    fn explanation_label(&self) -> &'static str {
        "anomalous location"
    }

    fn needs_region(&self) -> bool {
        true
    }

    fn spawn(&self, spec: &AnomalySpec, cfg: &SyntheticConfig, host: Option<&Entity>, rng: &mut ChaCha8Rng) -> Entity {
        let [x1, y1, x2, y2] = spec.region.expect("validated");
        let mut e = host_or_new(cfg, host, rng);
        e.x_range = (x1 as f64, (x2 - e.size) as f64);
        e.x = e.x.clamp(e.x_range.0, e.x_range.1);
        e.y = rng.random_range(y1..=y2 - e.size) as f64;
        e
    }
}

pub fn registry() -> &'static Registry<dyn AnomalyInjector> {
    static REG: OnceLock<Registry<dyn AnomalyInjector>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut reg: Registry<dyn AnomalyInjector> = Registry::new("anomaly kind");
        reg.register(Box::new(NovelShape))
            .register(Box::new(FastMover))
            .register(Box::new(ForbiddenRegion));
        reg
    })
}

/// Static scene shared by every clip. Flat mid-tone colours keep the
/// background cheap to model.
fn background(cfg: &SyntheticConfig, seed: u64) -> image::RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let (w, h) = (cfg.width as u32, cfg.height as u32);
    let [top, bottom] = cfg.walkway;
    let mut img = image::RgbImage::from_fn(w, h, |_, y| {
        if (top..bottom).contains(&(y as usize)) {
            image::Rgb([140, 136, 132])
        } else {
            image::Rgb([118, 138, 116])
        }
    });
    // Planters below the walkway, clear of any anomaly region above it.
    let s = cfg.entity_size as u32;
    if bottom as u32 + s < h {
        for _ in 0..4 {
            let x = rng.random_range(0..w - s);
            let y = rng.random_range(bottom as u32..h - s);
            for yy in y..y + s {
                for xx in x..x + s {
                    img.put_pixel(xx, yy, image::Rgb([84, 116, 88]));
                }
            }
        }
    }
    img
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SyntheticSummary {
    pub train_clips: usize,
    pub test_clips: usize,
    /// Flagged frame count per test clip id.
    pub anomalous_frames: BTreeMap<String, usize>,
}

pub fn clip_id(index: usize) -> String {
    format!("{:02}", index + 1)
}

struct RenderedClip {
    frames: Vec<image::RgbImage>,
    flags: Vec<bool>,
    labels: Vec<Vec<&'static str>>,
    boxes: Vec<Vec<serde_json::Value>>,
}

fn render_clip(cfg: &SyntheticConfig, seed: u64, stream: u64, anomalies: &[&AnomalySpec]) -> RenderedClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let bg = background(cfg, seed);
    struct Walker {
        e: Entity,
        /// Frames until re-entry while off screen.
        wait: usize,
    }
    let max_wait = (cfg.clip_len / 10).max(1);
    let mut walkers: Vec<Walker> = (0..cfg.entities)
        .map(|_| Walker {
            e: walker(cfg, &mut rng, (cfg.walkway[0], cfg.walkway[1]), cfg.speed),
            wait: 0,
        })
        .collect();
    struct Active<'a> {
        spec: &'a AnomalySpec,
        injector: &'a dyn AnomalyInjector,
        host: Option<usize>,
        entity: Option<Entity>,
    }
    let n_walkers = walkers.len();
    let mut active: Vec<Active> = anomalies
        .iter()
        .enumerate()
        .map(|(j, spec)| Active {
            spec,
            injector: registry().get(&spec.kind).expect("validated"),
            host: (n_walkers > 0).then(|| j % n_walkers),
            entity: None,
        })
        .collect();
    let mut out = RenderedClip {
        frames: Vec::with_capacity(cfg.clip_len),
        flags: Vec::with_capacity(cfg.clip_len),
        labels: Vec::with_capacity(cfg.clip_len),
        boxes: Vec::with_capacity(cfg.clip_len),
    };
    for t in 0..cfg.clip_len {
        let mut hidden = vec![false; n_walkers];
        for a in &mut active {
            let end = a.spec.start + a.spec.length;
            if t == a.spec.start {
                if let Some(h) = a.host {
                    // An absent or half-visible host is pulled fully into view.
                    let w = &mut walkers[h];
                    if w.wait > 0 {
                        w.e.x = rng.random_range(w.e.x_range.0..=w.e.x_range.1).round();
                        w.wait = 0;
                    }
                    w.e.x = w.e.x.clamp(w.e.x_range.0, w.e.x_range.1);
                }
                let host = a.host.map(|h| &walkers[h].e);
                a.entity = Some(a.injector.spawn(a.spec, cfg, host, &mut rng));
            }
            if t == end {
                // The walker resumes where the anomaly left off.
                if let (Some(h), Some(e)) = (a.host, a.entity.take()) {
                    let w = &mut walkers[h];
                    w.e.x = e.x.clamp(w.e.x_range.0, w.e.x_range.1);
                    w.e.vx = w.e.vx.abs().copysign(e.vx);
                    w.wait = 0;
                }
            }
            if (a.spec.start..end).contains(&t) {
                if let Some(h) = a.host {
                    hidden[h] = true;
                }
            }
        }
        let mut img = bg.clone();
        let mut boxes = Vec::new();
        let mut labels = Vec::new();
        let push_boxes = |e: &Entity, boxes: &mut Vec<serde_json::Value>| {
            let Some(b) = e.bbox(cfg.width) else {
                return;
            };
            boxes.push(json!({"box": b, "label": e.object_label, "score": 0.9, "source": "object"}));
            if let Some(a) = e.action_label {
                boxes.push(json!({"box": b, "label": a, "score": 0.8, "source": "action"}));
            }
        };
        for (w, _) in walkers.iter().zip(&hidden).filter(|(w, &h)| !h && w.wait == 0) {
            w.e.draw(&mut img);
            push_boxes(&w.e, &mut boxes);
        }
        for a in &active {
            if let Some(e) = &a.entity {
                e.draw(&mut img);
                push_boxes(e, &mut boxes);
                if !labels.contains(&a.injector.explanation_label()) {
                    labels.push(a.injector.explanation_label());
                }
            }
        }
        out.flags.push(!labels.is_empty());
        out.labels.push(labels);
        out.boxes.push(boxes);
        out.frames.push(img);
        for (w, _) in walkers.iter_mut().zip(&hidden).filter(|(_, &h)| !h) {
            if w.wait > 0 {
                w.wait -= 1;
                if w.wait == 0 {
                    // Re-enter from a random side, one step into the frame.
                    w.e = walker(cfg, &mut rng, (cfg.walkway[0], cfg.walkway[1]), cfg.speed);
                    w.e.x = if w.e.vx > 0.0 {
                        w.e.vx - w.e.size as f64
                    } else {
                        (cfg.width as f64) + w.e.vx
                    };
                }
            } else {
                w.e.x += w.e.vx;
                if !w.e.visible(cfg.width) {
                    w.wait = rng.random_range(1..=max_wait);
                }
            }
        }
        for e in active.iter_mut().filter_map(|a| a.entity.as_mut()) {
            e.step();
        }
    }
    out
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Renders both splits into `out`, which must be absent or empty.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64, out: &Path) -> Result<SyntheticSummary> {
    cfg.validate()?;
    if out.exists() {
        let mut it = fs::read_dir(out).map_err(|e| Error::io(out, e))?;
        if it.next().is_some() {
            return Err(Error::Config(format!("output directory {} is not empty", out.display())));
        }
    }
    let mut summary = SyntheticSummary {
        train_clips: cfg.train_clips,
        test_clips: cfg.test_clips,
        ..Default::default()
    };
    for (split, count, stream_base) in [("training", cfg.train_clips, 0u64), ("testing", cfg.test_clips, 1 << 32)] {
        let mut detections = String::new();
        for idx in 0..count {
            let id = clip_id(idx);
            let specs: Vec<&AnomalySpec> = if split == "testing" {
                cfg.anomalies.iter().filter(|a| a.clip == idx).collect()
            } else {
                Vec::new()
            };
            let clip = render_clip(cfg, seed, stream_base + idx as u64, &specs);
            let dir = out.join(split).join("frames").join(&id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (t, img) in clip.frames.iter().enumerate() {
                let path = dir.join(format!("{t:06}.png"));
                img.save(&path).map_err(|source| Error::Image { path, source })?;
            }
            for (t, boxes) in clip.boxes.iter().enumerate() {
                detections.push_str(&json!({"clip": id, "frame": t, "boxes": boxes}).to_string());
                detections.push('\n');
            }
            if split == "testing" {
                let flags: String = clip.flags.iter().map(|&f| if f { "1\n" } else { "0\n" }).collect();
                write(&out.join("testing/labels").join(format!("{id}.csv")), flags)?;
                let expl: String = clip
                    .labels
                    .iter()
                    .enumerate()
                    .map(|(t, l)| format!("{}\n", json!({"frame": t, "labels": l})))
                    .collect();
                write(&out.join("testing/explanations").join(format!("{id}.jsonl")), expl)?;
                summary
                    .anomalous_frames
                    .insert(id, clip.flags.iter().filter(|&&f| f).count());
            }
        }
        write(&out.join(split).join(DETECTIONS_FILE), detections)?;
    }
    write(&out.join(CONFIG_FILE), format!("# seed = {seed}\n{}", cfg.to_toml()))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_dataset, LoadOptions};
    use tempfile::TempDir;

    fn small() -> SyntheticConfig {
        let mut cfg = SyntheticConfig::for_size(32, 32);
        cfg.train_clips = 2;
        cfg.test_clips = 3;
        cfg.clip_len = 12;
        cfg.anomalies.retain(|a| a.clip < 3);
        for a in &mut cfg.anomalies {
            a.start = 4;
            a.length = 4;
        }
        cfg
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
        generate_synthetic(&small(), 7, a.path()).unwrap();
        generate_synthetic(&small(), 7, b.path()).unwrap();
        let p = "testing/frames/02/000005.png";
        assert_eq!(fs::read(a.path().join(p)).unwrap(), fs::read(b.path().join(p)).unwrap());
        let c = TempDir::new().unwrap();
        generate_synthetic(&small(), 8, c.path()).unwrap();
        assert_ne!(fs::read(a.path().join(p)).unwrap(), fs::read(c.path().join(p)).unwrap());
    }

    #[test]
    fn no_anomalies_means_no_flags() {
        let mut cfg = small();
        cfg.anomalies.clear();
        let tmp = TempDir::new().unwrap();
        let summary = generate_synthetic(&cfg, 1, tmp.path()).unwrap();
        assert!(summary.anomalous_frames.values().all(|&n| n == 0));
        let ds = load_dataset(tmp.path(), "synthetic", &LoadOptions { image_size: None, ..Default::default() }).unwrap();
        assert!(ds.labels.values().all(|l| l.anomalous_frames() == 0));
    }

    #[test]
    fn fast_mover_segment_flags_exactly_its_frames() {
        let mut cfg = SyntheticConfig::for_size(32, 32);
        cfg.train_clips = 1;
        cfg.test_clips = 1;
        cfg.clip_len = 40;
        cfg.anomalies = vec![AnomalySpec {
            kind: "fast_mover".into(),
            clip: 0,
            start: 10,
            length: 20,
            region: None,
        }];
        let tmp = TempDir::new().unwrap();
        generate_synthetic(&cfg, 3, tmp.path()).unwrap();
        let ds = load_dataset(tmp.path(), "synthetic", &LoadOptions { image_size: None, ..Default::default() }).unwrap();
        let gt = &ds.labels["01"];
        assert_eq!(gt.anomalous_frames(), 20);
        assert!(gt.frame_flags[10..30].iter().all(|&f| f));
        assert!(gt.explanation_labels[15].contains("running"));
        assert!(gt.explanation_labels[5].is_empty());
    }

    #[test]
    fn label_only_load_matches_full_load() {
        let tmp = TempDir::new().unwrap();
        generate_synthetic(&small(), 2, tmp.path()).unwrap();
        let ds = load_dataset(tmp.path(), "synthetic", &LoadOptions { image_size: None, ..Default::default() }).unwrap();
        assert_eq!(crate::dataset::load_labels(tmp.path(), "synthetic").unwrap(), ds.labels);
    }

    #[test]
    fn round_trip_through_loader_is_pixel_exact() {
        let tmp = TempDir::new().unwrap();
        let cfg = small();
        generate_synthetic(&cfg, 11, tmp.path()).unwrap();
        let ds = load_dataset(tmp.path(), "synthetic", &LoadOptions { image_size: None, ..Default::default() }).unwrap();
        assert_eq!(ds.training.len(), 2);
        assert_eq!(ds.testing.len(), 3);
        let img = image::open(tmp.path().join("testing/frames/01/000003.png")).unwrap().to_rgb8();
        assert_eq!(ds.testing[0].frames[3].to_rgb(), img);
        // Rendering again in memory gives identical pixels.
        let again = render_clip(&cfg, 11, 1 << 32, &cfg.anomalies.iter().filter(|a| a.clip == 0).collect::<Vec<_>>());
        assert_eq!(again.frames[3], img);
    }

    #[test]
    fn region_outside_frame_is_rejected() {
        let mut cfg = small();
        cfg.anomalies = vec![AnomalySpec {
            kind: "forbidden_region".into(),
            clip: 0,
            start: 0,
            length: 2,
            region: Some([0, 0, 64, 8]),
        }];
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("outside frame bounds"), "{err}");
        cfg.anomalies[0].region = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn non_empty_output_dir_is_refused() {
        let tmp = TempDir::new().unwrap();
        fs::write(tmp.path().join("x"), "").unwrap();
        assert!(generate_synthetic(&small(), 0, tmp.path()).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = SyntheticConfig::default();
        let back: SyntheticConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        assert!(cfg.validate().is_ok());
    }
}
