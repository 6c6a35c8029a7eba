//! Dataset tooling: the on-disk annotation schema, the split loader, and the
//! deterministic synthetic collision dataset used by every end-to-end test.
//!
//! Layout per split:
//!
//! ```text
//! root/{train,test}/
//!   manifest.json                    # ids, counts, frame size, schema_version
//!   annotations/<id>.json            # one document per video
//!   videos/<id>/frame_%05d.png       # extracted frames, 1-based
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::config::{SyntheticConfig, SCHEMA_VERSION};
use crate::detector::{AnnotatedObject, BoundingBox, Frame};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VideoLabel {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!(
                "unknown split '{other}' (expected train or test)"
            ))),
        }
    }
}

/// Per-frame ground truth: all object boxes plus, when known, which of them
/// are accident-related. `accident_indices: None` marks frames where the
/// upstream annotations do not say (the ranking loss skips those frames).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub boxes: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accident_indices: Option<Vec<usize>>,
}

/// One video's annotation document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub label: VideoLabel,
    pub fps: f64,
    pub num_frames: usize,
    /// 1-based onset frame; present iff the video is positive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accident_frame: Option<usize>,
    pub frames: Vec<FrameAnnotation>,
}

impl VideoAnnotation {
    pub fn is_positive(&self) -> bool {
        self.label == VideoLabel::Positive
    }

    /// Ground-truth boxes of frame `t` (1-based).
    pub fn gt_boxes(&self, t: usize) -> Vec<BoundingBox> {
        self.frames[t - 1]
            .boxes
            .iter()
            .filter_map(|b| BoundingBox::new(b[0], b[1], b[2], b[3]).ok())
            .collect()
    }

    /// Accident-related boxes of frame `t`, or `None` when unavailable.
    pub fn accident_boxes(&self, t: usize) -> Option<Vec<BoundingBox>> {
        let fa = &self.frames[t - 1];
        fa.accident_indices.as_ref().map(|idx| {
            idx.iter()
                .filter_map(|&i| {
                    fa.boxes.get(i).and_then(|b| {
                        BoundingBox::new(b[0], b[1], b[2], b[3]).ok()
                    })
                })
                .collect()
        })
    }

    fn validate(&self, expected_id: &str) -> Result<()> {
        let fail = |message: String| Error::SchemaValidation {
            video: expected_id.to_string(),
            message,
        };
        if self.video_id != expected_id {
            return Err(fail(format!(
                "annotation declares id '{}' but is stored as '{}'",
                self.video_id, expected_id
            )));
        }
        if self.fps <= 0.0 || !self.fps.is_finite() {
            return Err(fail(format!("fps {} must be positive", self.fps)));
        }
        if self.frames.len() != self.num_frames {
            return Err(fail(format!(
                "num_frames {} but {} frame annotations",
                self.num_frames,
                self.frames.len()
            )));
        }
        match (self.label, self.accident_frame) {
            (VideoLabel::Positive, Some(t_a)) => {
                if t_a < 1 || t_a > self.num_frames {
                    return Err(fail(format!(
                        "accident_frame {t_a} outside 1..={}",
                        self.num_frames
                    )));
                }
            }
            (VideoLabel::Positive, None) => {
                return Err(fail("positive video without accident_frame".into()));
            }
            (VideoLabel::Negative, Some(_)) => {
                return Err(fail("negative video with accident_frame".into()));
            }
            (VideoLabel::Negative, None) => {}
        }
        for (i, fa) in self.frames.iter().enumerate() {
            for b in &fa.boxes {
                if !b.iter().all(|v| v.is_finite()) || b[0] >= b[2] || b[1] >= b[3] {
                    return Err(fail(format!("frame {}: malformed box {:?}", i + 1, b)));
                }
            }
            if let Some(idx) = &fa.accident_indices {
                if self.label == VideoLabel::Negative && !idx.is_empty() {
                    return Err(fail(format!(
                        "frame {}: negative video with accident boxes",
                        i + 1
                    )));
                }
                for &j in idx {
                    if j >= fa.boxes.len() {
                        return Err(fail(format!(
                            "frame {}: accident index {} out of range ({} boxes)",
                            i + 1,
                            j,
                            fa.boxes.len()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub positive: usize,
    pub negative: usize,
}

/// Split-level index document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub frame_size: (u32, u32),
    pub ids: Vec<String>,
    pub counts: ManifestCounts,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Per-frame seed for the fabricated features: a pure function of the video
/// id and frame index, so loading is reproducible.
pub fn frame_seed(video_id: &str, frame_index: usize) -> u64 {
    fnv1a(video_id.as_bytes()).wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(frame_index as u64))
}

/// Lazy handle to one video's frames.
#[derive(Debug, Clone)]
pub struct VideoSource {
    pub annotation: VideoAnnotation,
    frames_dir: PathBuf,
    frame_size: (u32, u32),
}

impl VideoSource {
    pub fn num_frames(&self) -> usize {
        self.annotation.num_frames
    }

    pub fn frame_size(&self) -> (u32, u32) {
        self.frame_size
    }

    fn objects(&self, t: usize) -> Vec<AnnotatedObject> {
        self.annotation
            .gt_boxes(t)
            .into_iter()
            .map(|bbox| AnnotatedObject {
                bbox,
                confidence: 1.0,
                class_id: 2,
            })
            .collect()
    }

    /// Frame metadata without pixel data; enough for the synthetic backend.
    pub fn frame(&self, t: usize) -> Frame {
        Frame {
            video_id: self.annotation.video_id.clone(),
            index: t,
            width: self.frame_size.0,
            height: self.frame_size.1,
            objects: self.objects(t),
            seed: frame_seed(&self.annotation.video_id, t),
            pixels: None,
        }
    }

    /// Frame with decoded pixels; needed for overlay rendering and external
    /// backends.
    pub fn frame_with_pixels(&self, t: usize) -> Result<Frame> {
        let path = self.frames_dir.join(format!("frame_{t:05}.png"));
        let img = image::open(&path)
            .map_err(|e| Error::MissingData(format!("cannot read '{}': {e}", path.display())))?
            .into_rgb8();
        let mut frame = self.frame(t);
        frame.pixels = Some(img);
        Ok(frame)
    }

    pub fn frame_path(&self, t: usize) -> PathBuf {
        self.frames_dir.join(format!("frame_{t:05}.png"))
    }
}

/// Load and validate one split.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<VideoSource>> {
    let split_dir = root.join(split.dir_name());
    let manifest_path = split_dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        Error::MissingData(format!("cannot read '{}': {e}", manifest_path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::InvalidAnnotation(format!(
            "manifest schema_version {} != supported {}",
            manifest.schema_version, SCHEMA_VERSION
        )));
    }

    let mut videos = Vec::with_capacity(manifest.ids.len());
    let mut counts = ManifestCounts {
        positive: 0,
        negative: 0,
    };
    for id in &manifest.ids {
        let ann_path = split_dir.join("annotations").join(format!("{id}.json"));
        let text = std::fs::read_to_string(&ann_path).map_err(|e| {
            Error::MissingData(format!("cannot read '{}': {e}", ann_path.display()))
        })?;
        let annotation: VideoAnnotation =
            serde_json::from_str(&text).map_err(|e| Error::SchemaValidation {
                video: id.clone(),
                message: e.to_string(),
            })?;
        annotation.validate(id)?;

        // Clamping must leave every box usable.
        let (w, h) = (manifest.frame_size.0 as f64, manifest.frame_size.1 as f64);
        for t in 1..=annotation.num_frames {
            for b in annotation.gt_boxes(t) {
                b.clamped(w, h).map_err(|e| Error::SchemaValidation {
                    video: id.clone(),
                    message: format!("frame {t}: {e}"),
                })?;
            }
        }

        let frames_dir = split_dir.join("videos").join(id);
        for t in 1..=annotation.num_frames {
            let p = frames_dir.join(format!("frame_{t:05}.png"));
            if !p.is_file() {
                return Err(Error::MissingData(format!(
                    "video '{id}' is missing frame file '{}'",
                    p.display()
                )));
            }
        }

        match annotation.label {
            VideoLabel::Positive => counts.positive += 1,
            VideoLabel::Negative => counts.negative += 1,
        }
        videos.push(VideoSource {
            annotation,
            frames_dir,
            frame_size: manifest.frame_size,
        });
    }
    if counts != manifest.counts {
        return Err(Error::InvalidAnnotation(format!(
            "manifest declares {}+{} videos but {}+{} were loaded",
            manifest.counts.positive, manifest.counts.negative, counts.positive, counts.negative
        )));
    }
    Ok(videos)
}

// ---- synthetic dataset generation ----

#[derive(Debug, Clone, Copy)]
struct MovingRect {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    w: f64,
    h: f64,
    color: [u8; 3],
}

impl MovingRect {
    fn bbox_at(&self, t: usize) -> BoundingBox {
        // t is 1-based; frame 1 is the initial position.
        let dt = (t - 1) as f64;
        let cx = self.cx + self.vx * dt;
        let cy = self.cy + self.vy * dt;
        BoundingBox {
            x1: cx - self.w / 2.0,
            y1: cy - self.h / 2.0,
            x2: cx + self.w / 2.0,
            y2: cy + self.h / 2.0,
        }
    }

    fn inside_for_whole_video(&self, frames: usize, w: f64, h: f64) -> bool {
        for &t in &[1usize, frames] {
            let b = self.bbox_at(t);
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
                return false;
            }
        }
        true
    }
}

fn boxes_overlap_with_gap(a: &BoundingBox, b: &BoundingBox, gap: f64) -> bool {
    a.x1 - gap < b.x2 && b.x1 - gap < a.x2 && a.y1 - gap < b.y2 && b.y1 - gap < a.y2
}

fn separated_all_frames(a: &MovingRect, b: &MovingRect, frames: usize, gap: f64) -> bool {
    (1..=frames).all(|t| !boxes_overlap_with_gap(&a.bbox_at(t), &b.bbox_at(t), gap))
}

const PALETTE: [[u8; 3]; 6] = [
    [220, 60, 60],
    [60, 120, 220],
    [240, 200, 70],
    [90, 200, 120],
    [200, 100, 220],
    [230, 140, 60],
];

fn sample_rect(rng: &mut ChaCha8Rng, w: f64, h: f64, frames: usize, color: [u8; 3]) -> MovingRect {
    loop {
        let rect = MovingRect {
            cx: rng.random_range(0.2 * w..0.8 * w),
            cy: rng.random_range(0.2 * h..0.8 * h),
            vx: rng.random_range(-2.5..2.5),
            vy: rng.random_range(-2.5..2.5),
            w: rng.random_range(0.1 * w..0.2 * w),
            h: rng.random_range(0.1 * h..0.2 * h),
            color,
        };
        if rect.inside_for_whole_video(frames, w, h) {
            return rect;
        }
    }
}

/// First 1-based frame where the two rects overlap, if any.
fn first_overlap(a: &MovingRect, b: &MovingRect, frames: usize) -> Option<usize> {
    (1..=frames).find(|&t| crate::losses::iou(&a.bbox_at(t), &b.bbox_at(t)) > 0.0)
}

struct GeneratedVideo {
    objects: Vec<MovingRect>,
    /// Indices into `objects` of the colliding pair, for positives.
    accident_pair: Option<(usize, usize)>,
    onset: Option<usize>,
}

fn generate_positive(rng: &mut ChaCha8Rng, w: f64, h: f64, frames: usize) -> Result<GeneratedVideo> {
    const GAP: f64 = 4.0;
    for _attempt in 0..5000 {
        let meet_x = rng.random_range(0.35 * w..0.65 * w);
        let meet_y = rng.random_range(0.35 * h..0.65 * h);
        let t_meet = rng.random_range(0.72 * frames as f64..0.95 * frames as f64);
        let angle_a = rng.random_range(0.0..std::f64::consts::TAU);
        let angle_b = angle_a + std::f64::consts::PI + rng.random_range(-0.9..0.9);
        let speed_a = rng.random_range(1.2..2.8);
        let speed_b = rng.random_range(1.2..2.8);

        let make = |angle: f64, speed: f64, color, rng: &mut ChaCha8Rng| {
            let vx = speed * angle.cos();
            let vy = speed * angle.sin();
            MovingRect {
                // position at frame 1 so that the center passes the meeting
                // point at t_meet
                cx: meet_x - vx * (t_meet - 1.0),
                cy: meet_y - vy * (t_meet - 1.0),
                vx,
                vy,
                w: rng.random_range(0.1 * w..0.18 * w),
                h: rng.random_range(0.1 * h..0.18 * h),
                color,
            }
        };
        let a = make(angle_a, speed_a, PALETTE[0], rng);
        let b = make(angle_b, speed_b, PALETTE[1], rng);
        if !a.inside_for_whole_video(frames, w, h) || !b.inside_for_whole_video(frames, w, h) {
            continue;
        }
        let Some(onset) = first_overlap(&a, &b, frames) else {
            continue;
        };
        if (onset as f64) < 0.55 * frames as f64 || onset >= frames {
            continue;
        }

        let mut objects = vec![a, b];
        let mut ok = true;
        for d in 0..2 {
            let mut placed = false;
            for _ in 0..300 {
                let cand = sample_rect(rng, w, h, frames, PALETTE[2 + d]);
                if objects
                    .iter()
                    .all(|o| separated_all_frames(o, &cand, frames, GAP))
                {
                    objects.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        return Ok(GeneratedVideo {
            objects,
            accident_pair: Some((0, 1)),
            onset: Some(onset),
        });
    }
    Err(Error::GenerationError(
        "could not place a collision course within the frame".into(),
    ))
}

fn generate_negative(rng: &mut ChaCha8Rng, w: f64, h: f64, frames: usize) -> Result<GeneratedVideo> {
    const GAP: f64 = 4.0;
    for _attempt in 0..5000 {
        let mut objects: Vec<MovingRect> = Vec::new();
        let mut ok = true;
        for i in 0..4 {
            let mut placed = false;
            for _ in 0..300 {
                let cand = sample_rect(rng, w, h, frames, PALETTE[i % PALETTE.len()]);
                if objects
                    .iter()
                    .all(|o| separated_all_frames(o, &cand, frames, GAP))
                {
                    objects.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok(GeneratedVideo {
                objects,
                accident_pair: None,
                onset: None,
            });
        }
    }
    Err(Error::GenerationError(
        "could not place disjoint trajectories within the frame".into(),
    ))
}

fn render_frame(
    video_seed: u64,
    t: usize,
    objects: &[MovingRect],
    w: u32,
    h: u32,
) -> image::RgbImage {
    let mut img = image::RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let n = super_mix(video_seed, x as u64, y as u64);
            let g = 40 + (n % 32) as u8;
            img.put_pixel(x, y, image::Rgb([g, g, g + 8]));
        }
    }
    for o in objects {
        let b = o.bbox_at(t);
        let x0 = b.x1.max(0.0) as u32;
        let y0 = b.y1.max(0.0) as u32;
        let x1 = (b.x2.min(w as f64)).ceil() as u32;
        let y1 = (b.y2.min(h as f64)).ceil() as u32;
        for y in y0..y1.min(h) {
            for x in x0..x1.min(w) {
                if (x as f64 + 0.5) >= b.x1
                    && (x as f64 + 0.5) < b.x2
                    && (y as f64 + 0.5) >= b.y1
                    && (y as f64 + 0.5) < b.y2
                {
                    img.put_pixel(x, y, image::Rgb(o.color));
                }
            }
        }
    }
    img
}

fn super_mix(a: u64, b: u64, c: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9e3779b97f4a7c15) ^ c.wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x ^ (x >> 31)
}

fn annotation_for(video: &GeneratedVideo, id: &str, cfg: &SyntheticConfig) -> VideoAnnotation {
    let frames = (1..=cfg.frames_per_video)
        .map(|t| {
            let boxes: Vec<[f64; 4]> = video
                .objects
                .iter()
                .map(|o| {
                    let b = o.bbox_at(t);
                    [b.x1, b.y1, b.x2, b.y2]
                })
                .collect();
            let accident_indices = match (video.accident_pair, video.onset) {
                (Some((i, j)), Some(onset)) => {
                    let window = (2.0 * cfg.fps).round() as usize;
                    let start = onset.saturating_sub(window).max(1);
                    if t >= start {
                        Some(vec![i, j])
                    } else {
                        Some(vec![])
                    }
                }
                _ => Some(vec![]),
            };
            FrameAnnotation {
                boxes,
                accident_indices,
            }
        })
        .collect();
    VideoAnnotation {
        video_id: id.to_string(),
        label: if video.onset.is_some() {
            VideoLabel::Positive
        } else {
            VideoLabel::Negative
        },
        fps: cfg.fps,
        num_frames: cfg.frames_per_video,
        accident_frame: video.onset,
        frames,
    }
}

fn generate_split(root: &Path, split: Split, cfg: &SyntheticConfig) -> Result<Manifest> {
    let split_dir = root.join(split.dir_name());
    std::fs::create_dir_all(split_dir.join("annotations"))?;
    std::fs::create_dir_all(split_dir.join("videos"))?;

    let (w, h) = (cfg.frame_size.0 as f64, cfg.frame_size.1 as f64);
    let mut ids = Vec::new();
    for label in [VideoLabel::Positive, VideoLabel::Negative] {
        let (count, tag) = match label {
            VideoLabel::Positive => (cfg.num_positive, "pos"),
            VideoLabel::Negative => (cfg.num_negative, "neg"),
        };
        for i in 0..count {
            let id = format!("{}_{}_{:03}", split.dir_name(), tag, i);
            let seed = super_mix(cfg.seed, fnv1a(id.as_bytes()), 0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let video = match label {
                VideoLabel::Positive => generate_positive(&mut rng, w, h, cfg.frames_per_video)?,
                VideoLabel::Negative => generate_negative(&mut rng, w, h, cfg.frames_per_video)?,
            };
            let annotation = annotation_for(&video, &id, cfg);
            let ann_path = split_dir.join("annotations").join(format!("{id}.json"));
            std::fs::write(&ann_path, serde_json::to_string_pretty(&annotation)?)?;

            let vdir = split_dir.join("videos").join(&id);
            std::fs::create_dir_all(&vdir)?;
            for t in 1..=cfg.frames_per_video {
                let img = render_frame(seed, t, &video.objects, cfg.frame_size.0, cfg.frame_size.1);
                img.save(vdir.join(format!("frame_{t:05}.png")))
                    .map_err(|e| Error::GenerationError(e.to_string()))?;
            }
            ids.push(id);
        }
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        frame_size: cfg.frame_size,
        ids,
        counts: ManifestCounts {
            positive: cfg.num_positive,
            negative: cfg.num_negative,
        },
    };
    std::fs::write(
        split_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Generate both splits of the synthetic collision dataset. The test split
/// gets a quarter of the configured counts (at least two videos per class)
/// from derived seeds; identical configs produce byte-identical files.
pub fn generate_synthetic(root: &Path, cfg: &SyntheticConfig) -> Result<()> {
    cfg.validate()?;
    generate_split(root, Split::Train, cfg)?;
    let test_cfg = SyntheticConfig {
        num_positive: (cfg.num_positive / 4).max(2),
        num_negative: (cfg.num_negative / 4).max(2),
        seed: cfg.seed.wrapping_add(1),
        ..cfg.clone()
    };
    generate_split(root, Split::Test, &test_cfg)?;
    Ok(())
}

/// Ids of every video across both splits; errors if the splits intersect.
pub fn check_split_disjoint(root: &Path) -> Result<()> {
    let train = load_dataset(root, Split::Train)?;
    let test = load_dataset(root, Split::Test)?;
    let train_ids: BTreeSet<&str> = train.iter().map(|v| v.annotation.video_id.as_str()).collect();
    for v in &test {
        if train_ids.contains(v.annotation.video_id.as_str()) {
            return Err(Error::InvalidAnnotation(format!(
                "video id '{}' appears in both splits",
                v.annotation.video_id
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::iou;

    fn tiny_config() -> SyntheticConfig {
        SyntheticConfig {
            num_positive: 3,
            num_negative: 3,
            frames_per_video: 16,
            fps: 10.0,
            frame_size: (96, 96),
            seed: 7,
        }
    }

    fn tmp_root(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("rare-data-{tag}-{}", std::process::id()));
        std::fs::remove_dir_all(&dir).ok();
        dir
    }

    #[test]
    fn generation_roundtrip_and_invariants() {
        let root = tmp_root("roundtrip");
        let cfg = tiny_config();
        generate_synthetic(&root, &cfg).unwrap();

        let train = load_dataset(&root, Split::Train).unwrap();
        assert_eq!(train.len(), 6);
        let positives: Vec<_> = train.iter().filter(|v| v.annotation.is_positive()).collect();
        assert_eq!(positives.len(), 3);

        for v in &train {
            let ann = &v.annotation;
            assert_eq!(ann.frames.len(), cfg.frames_per_video);
            match ann.label {
                VideoLabel::Positive => {
                    let t_a = ann.accident_frame.unwrap();
                    assert!(t_a >= 1 && t_a <= ann.num_frames);
                    let pair = ann.accident_boxes(t_a).unwrap();
                    assert_eq!(pair.len(), 2);
                    assert!(iou(&pair[0], &pair[1]) > 0.0, "{}: no overlap at onset", ann.video_id);
                    if t_a > 1 {
                        let before = ann.gt_boxes(t_a - 1);
                        assert_eq!(iou(&before[0], &before[1]), 0.0, "{}", ann.video_id);
                    }
                }
                VideoLabel::Negative => {
                    for t in 1..=ann.num_frames {
                        let boxes = ann.gt_boxes(t);
                        for i in 0..boxes.len() {
                            for j in (i + 1)..boxes.len() {
                                assert_eq!(iou(&boxes[i], &boxes[j]), 0.0);
                            }
                        }
                    }
                }
            }
        }

        check_split_disjoint(&root).unwrap();
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn generation_is_byte_identical() {
        let root_a = tmp_root("det-a");
        let root_b = tmp_root("det-b");
        let cfg = SyntheticConfig {
            num_positive: 2,
            num_negative: 2,
            frames_per_video: 12,
            ..tiny_config()
        };
        generate_synthetic(&root_a, &cfg).unwrap();
        generate_synthetic(&root_b, &cfg).unwrap();

        let manifest: Manifest = serde_json::from_str(
            &std::fs::read_to_string(root_a.join("train/manifest.json")).unwrap(),
        )
        .unwrap();
        for id in &manifest.ids {
            let a = std::fs::read(root_a.join(format!("train/annotations/{id}.json"))).unwrap();
            let b = std::fs::read(root_b.join(format!("train/annotations/{id}.json"))).unwrap();
            assert_eq!(a, b, "annotation bytes differ for {id}");
        }
        std::fs::remove_dir_all(&root_a).ok();
        std::fs::remove_dir_all(&root_b).ok();
    }

    #[test]
    fn loader_reports_schema_violations_by_video() {
        let root = tmp_root("schema");
        let cfg = SyntheticConfig {
            num_positive: 1,
            num_negative: 1,
            frames_per_video: 8,
            ..tiny_config()
        };
        generate_synthetic(&root, &cfg).unwrap();

        // Corrupt one annotation: onset beyond the video.
        let path = root.join("train/annotations/train_pos_000.json");
        let mut ann: VideoAnnotation =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        ann.accident_frame = Some(ann.num_frames + 5);
        std::fs::write(&path, serde_json::to_string(&ann).unwrap()).unwrap();

        let err = load_dataset(&root, Split::Train).unwrap_err();
        match err {
            Error::SchemaValidation { video, .. } => assert_eq!(video, "train_pos_000"),
            other => panic!("expected schema error, got {other:?}"),
        }
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn loader_detects_missing_frames() {
        let root = tmp_root("missing");
        let cfg = SyntheticConfig {
            num_positive: 1,
            num_negative: 1,
            frames_per_video: 8,
            ..tiny_config()
        };
        generate_synthetic(&root, &cfg).unwrap();
        std::fs::remove_file(root.join("train/videos/train_neg_000/frame_00003.png")).unwrap();
        let err = load_dataset(&root, Split::Train).unwrap_err();
        assert_eq!(err.kind(), "missing-data");
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn frames_expose_annotated_objects_and_stable_seeds() {
        let root = tmp_root("frames");
        let cfg = SyntheticConfig {
            num_positive: 1,
            num_negative: 1,
            frames_per_video: 8,
            ..tiny_config()
        };
        generate_synthetic(&root, &cfg).unwrap();
        let videos = load_dataset(&root, Split::Train).unwrap();
        let v = &videos[0];
        let f3 = v.frame(3);
        assert_eq!(f3.index, 3);
        assert_eq!(f3.objects.len(), v.annotation.frames[2].boxes.len());
        assert_eq!(f3.seed, v.frame(3).seed);
        assert_ne!(f3.seed, v.frame(4).seed);
        assert!(f3.pixels.is_none());

        let with_pixels = v.frame_with_pixels(3).unwrap();
        let img = with_pixels.pixels.unwrap();
        assert_eq!(img.dimensions(), cfg.frame_size);
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn dad_shaped_annotation_is_accepted() {
        // 100 frames at 20 fps, onset in the final half second.
        let frames: Vec<FrameAnnotation> = (0..100)
            .map(|_| FrameAnnotation {
                boxes: vec![[10.0, 10.0, 50.0, 40.0]],
                accident_indices: None,
            })
            .collect();
        let ann = VideoAnnotation {
            video_id: "dad_0001".into(),
            label: VideoLabel::Positive,
            fps: 20.0,
            num_frames: 100,
            accident_frame: Some(95),
            frames,
        };
        ann.validate("dad_0001").unwrap();
        assert_eq!(ann.num_frames, 100);
        assert_eq!(ann.fps, 20.0);
        // Frames without accident annotations report None so the ranking
        // loss can skip them.
        assert!(ann.accident_boxes(95).is_none());
    }
}
