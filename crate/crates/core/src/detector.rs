//! Detector contract: per-frame detections plus the detector's intermediate
//! feature maps.
//!
//! Two backends implement the contract. The synthetic oracle echoes annotated
//! boxes and fabricates deterministic feature maps from them, which is what
//! every test and the desk-scale experiments run on. The external adapter
//! reads per-frame dumps produced by a real pretrained detector and is only
//! exercised by a manually-run smoke test.

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, CLASS_NAMES};
use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "box coordinates must be finite, got ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidInput(format!(
                "box must have positive extent, got ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Clamp into `[0, w] x [0, h]`; degenerate results are an error.
    pub fn clamped(&self, w: f64, h: f64) -> Result<Self> {
        let b = Self {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        };
        if b.x1 >= b.x2 || b.y1 >= b.y2 {
            return Err(Error::DegenerateBox(format!(
                "box ({}, {}, {}, {}) degenerate after clamping to {w}x{h}",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(b)
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            x2: self.x2 * sx,
            y2: self.y2 * sy,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// One filtered detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub class_id: u8,
}

/// Dense `channels x height x width` activation map at a known stride.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub stride: usize,
    pub values: Array3<f64>,
}

impl FeatureMap {
    pub fn new(values: Array3<f64>, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidConfig("feature stride must be >= 1".into()));
        }
        let (c, h, w) = values.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape(format!(
                "feature map must be non-empty, got {c}x{h}x{w}"
            )));
        }
        Ok(Self { stride, values })
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }
}

/// Full per-frame detector output: filtered detections plus reusable
/// intermediate features.
#[derive(Debug, Clone)]
pub struct DetectionOutput {
    /// Sorted by non-increasing confidence, at most `n_max` entries.
    pub detections: Vec<Detection>,
    pub backbone: FeatureMap,
    pub neck: Vec<FeatureMap>,
}

/// Annotated object attached to a frame; the synthetic oracle's ground truth.
#[derive(Debug, Clone)]
pub struct AnnotatedObject {
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub class_id: u8,
}

/// One video frame as seen by the detector. Pixels are optional: the
/// synthetic backend works from annotations and a per-frame seed alone.
#[derive(Debug, Clone)]
pub struct Frame {
    pub video_id: String,
    /// 1-based frame index within the video.
    pub index: usize,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<AnnotatedObject>,
    /// Drives the fabricated background pattern; derived from video id and
    /// frame index by the data pipeline.
    pub seed: u64,
    pub pixels: Option<image::RgbImage>,
}

/// Channel counts and strides of the fabricated feature pyramid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureShapeSpec {
    pub input_size: u32,
    /// (channels, stride)
    pub backbone: (usize, usize),
    /// (channels, stride) per scale, strictly increasing stride.
    pub neck: Vec<(usize, usize)>,
}

impl FeatureShapeSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            input_size: cfg.input_size,
            backbone: (cfg.backbone_channels, cfg.backbone_stride),
            neck: cfg
                .neck_channels
                .iter()
                .zip(cfg.neck_strides.iter())
                .map(|(&c, &s)| (c, s))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::InvalidConfig("input_size must be positive".into()));
        }
        if self.neck.is_empty() {
            return Err(Error::InvalidConfig(
                "shape spec must declare at least one neck scale".into(),
            ));
        }
        for &(c, s) in std::iter::once(&self.backbone).chain(self.neck.iter()) {
            if c == 0 || s == 0 {
                return Err(Error::InvalidConfig(
                    "channels and strides must be positive".into(),
                ));
            }
        }
        if !self.neck.windows(2).all(|w| w[0].1 < w[1].1) {
            return Err(Error::InvalidConfig(
                "neck strides must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

fn map_extent(input: u32, stride: usize) -> usize {
    (input as usize).div_ceil(stride)
}

/// splitmix64 finalizer; the only mixing primitive the fabricated features use.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn unit_noise(seed: u64, scale: u64, c: u64, y: u64, x: u64) -> f64 {
    let h = mix(seed ^ mix(scale ^ mix(c ^ mix(y ^ mix(x)))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn channel_gain(c: usize) -> f64 {
    0.5 + unit_noise(0xC0FFEE, 0, c as u64, 0, 0)
}

const NOISE_AMPLITUDE: f64 = 0.05;

fn rasterize_mask(boxes: &[BoundingBox], stride: usize, h: usize, w: usize) -> Array2<f64> {
    let mut mask = Array2::<f64>::zeros((h, w));
    for b in boxes {
        for y in 0..h {
            let cy = (y as f64 + 0.5) * stride as f64;
            if cy < b.y1 || cy >= b.y2 {
                continue;
            }
            for x in 0..w {
                let cx = (x as f64 + 0.5) * stride as f64;
                if cx >= b.x1 && cx < b.x2 {
                    mask[(y, x)] += 1.0;
                }
            }
        }
    }
    mask
}

/// Separable 3-tap blur (zero padding), applied `passes` times.
fn blur(mask: &mut Array2<f64>, passes: usize) {
    let (h, w) = mask.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for _ in 0..passes {
        for y in 0..h {
            for x in 0..w {
                let l = if x > 0 { mask[(y, x - 1)] } else { 0.0 };
                let r = if x + 1 < w { mask[(y, x + 1)] } else { 0.0 };
                tmp[(y, x)] = 0.25 * l + 0.5 * mask[(y, x)] + 0.25 * r;
            }
        }
        for x in 0..w {
            for y in 0..h {
                let u = if y > 0 { tmp[(y - 1, x)] } else { 0.0 };
                let d = if y + 1 < h { tmp[(y + 1, x)] } else { 0.0 };
                mask[(y, x)] = 0.25 * u + 0.5 * tmp[(y, x)] + 0.25 * d;
            }
        }
    }
}

fn fabricate_map(
    boxes: &[BoundingBox],
    scene_seed: u64,
    scale_idx: u64,
    channels: usize,
    stride: usize,
    input: u32,
) -> FeatureMap {
    let h = map_extent(input, stride);
    let w = map_extent(input, stride);
    let mut mask = rasterize_mask(boxes, stride, h, w);
    blur(&mut mask, 2);
    let mut values = Array3::<f64>::zeros((channels, h, w));
    for c in 0..channels {
        let gain = channel_gain(c);
        for y in 0..h {
            for x in 0..w {
                values[(c, y, x)] = gain * mask[(y, x)]
                    + NOISE_AMPLITUDE
                        * unit_noise(scene_seed, scale_idx, c as u64, y as u64, x as u64);
            }
        }
    }
    FeatureMap { stride, values }
}

/// Deterministically fabricate backbone + neck maps from box geometry.
///
/// Each map is a smoothed rasterization of the box masks plus seeded
/// low-amplitude noise: object regions carry signal that RoI pooling can pick
/// up, and identical inputs produce bit-identical outputs.
pub fn synthesize_features(
    boxes: &[BoundingBox],
    scene_seed: u64,
    shapes: &FeatureShapeSpec,
) -> Result<(FeatureMap, Vec<FeatureMap>)> {
    shapes.validate()?;
    let backbone = fabricate_map(
        boxes,
        scene_seed,
        0,
        shapes.backbone.0,
        shapes.backbone.1,
        shapes.input_size,
    );
    let neck = shapes
        .neck
        .iter()
        .enumerate()
        .map(|(i, &(c, s))| fabricate_map(boxes, scene_seed, 1 + i as u64, c, s, shapes.input_size))
        .collect();
    Ok((backbone, neck))
}

/// Per-frame detection interface shared by all backends.
pub trait DetectorBackend: Send + Sync {
    fn detect(&self, frame: &Frame) -> Result<DetectionOutput>;

    /// Square resolution the detector operates at.
    fn input_size(&self) -> u32;
}

/// Oracle backend: echoes annotated boxes through the configured filtering
/// and fabricates feature maps from them.
pub struct SyntheticDetector {
    input_size: u32,
    confidence_threshold: f64,
    allowed: Vec<u8>,
    n_max: usize,
    shapes: FeatureShapeSpec,
}

impl SyntheticDetector {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let shapes = FeatureShapeSpec::from_config(cfg);
        shapes.validate()?;
        Ok(Self {
            input_size: cfg.input_size,
            confidence_threshold: cfg.confidence_threshold,
            allowed: cfg.allowed_class_ids(),
            n_max: cfg.n_max,
            shapes,
        })
    }

    pub fn shapes(&self) -> &FeatureShapeSpec {
        &self.shapes
    }
}

impl DetectorBackend for SyntheticDetector {
    fn detect(&self, frame: &Frame) -> Result<DetectionOutput> {
        if frame.width == 0 || frame.height == 0 {
            return Err(Error::InvalidInput(format!(
                "frame {}x{} has non-positive dimensions",
                frame.width, frame.height
            )));
        }
        let sx = self.input_size as f64 / frame.width as f64;
        let sy = self.input_size as f64 / frame.height as f64;
        let bound = self.input_size as f64;

        let mut detections: Vec<Detection> = frame
            .objects
            .iter()
            .filter(|o| o.confidence > self.confidence_threshold)
            .filter(|o| self.allowed.contains(&o.class_id))
            .filter_map(|o| {
                let scaled = o.bbox.scaled(sx, sy);
                scaled.clamped(bound, bound).ok().map(|bbox| Detection {
                    bbox,
                    confidence: o.confidence,
                    class_id: o.class_id,
                })
            })
            .collect();
        // Stable sort keeps annotation order among equal confidences.
        detections.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
        detections.truncate(self.n_max);

        let boxes: Vec<BoundingBox> = detections.iter().map(|d| d.bbox).collect();
        let (backbone, neck) = synthesize_features(&boxes, frame.seed, &self.shapes)?;
        Ok(DetectionOutput {
            detections,
            backbone,
            neck,
        })
    }

    fn input_size(&self) -> u32 {
        self.input_size
    }
}

/// On-disk dump format consumed by the external adapter, one JSON document
/// per frame at `<dump_dir>/<video_id>/frame_XXXXX.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct DetectorDump {
    pub detections: Vec<Detection>,
    pub backbone: FeatureDump,
    pub neck: Vec<FeatureDump>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureDump {
    pub stride: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureDump {
    fn into_map(self) -> Result<FeatureMap> {
        let arr = Array3::from_shape_vec((self.channels, self.height, self.width), self.values)
            .map_err(|e| Error::InvalidShape(e.to_string()))?;
        FeatureMap::new(arr, self.stride)
    }
}

/// Adapter slot for a real pretrained detector: inference runs out-of-process
/// and leaves per-frame dumps that this backend replays.
#[derive(Debug)]
pub struct ExternalDetector {
    dump_dir: PathBuf,
    input_size: u32,
    n_max: usize,
}

impl ExternalDetector {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let dir = cfg.external_dump_dir.clone().ok_or_else(|| {
            Error::BackendUnavailable(
                "backend = 'external' requires external_dump_dir to be set".into(),
            )
        })?;
        let dump_dir = PathBuf::from(dir);
        if !dump_dir.is_dir() {
            return Err(Error::BackendUnavailable(format!(
                "external dump directory '{}' does not exist",
                dump_dir.display()
            )));
        }
        Ok(Self {
            dump_dir,
            input_size: cfg.input_size,
            n_max: cfg.n_max,
        })
    }
}

impl DetectorBackend for ExternalDetector {
    fn detect(&self, frame: &Frame) -> Result<DetectionOutput> {
        if frame.width == 0 || frame.height == 0 {
            return Err(Error::InvalidInput(format!(
                "frame {}x{} has non-positive dimensions",
                frame.width, frame.height
            )));
        }
        let path = self
            .dump_dir
            .join(&frame.video_id)
            .join(format!("frame_{:05}.json", frame.index));
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::BackendUnavailable(format!("missing dump '{}': {e}", path.display()))
        })?;
        let dump: DetectorDump = serde_json::from_str(&text)?;
        let mut detections = dump.detections;
        detections.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
        detections.truncate(self.n_max);
        Ok(DetectionOutput {
            detections,
            backbone: dump.backbone.into_map()?,
            neck: dump
                .neck
                .into_iter()
                .map(FeatureDump::into_map)
                .collect::<Result<Vec<_>>>()?,
        })
    }

    fn input_size(&self) -> u32 {
        self.input_size
    }
}

/// Build the backend named by `cfg.backend`.
pub fn make_detector(cfg: &RunConfig) -> Result<Box<dyn DetectorBackend>> {
    match cfg.backend.as_str() {
        "synthetic" => Ok(Box::new(SyntheticDetector::new(cfg)?)),
        "external" => Ok(Box::new(ExternalDetector::new(cfg)?)),
        other => Err(Error::InvalidConfig(format!("unknown backend '{other}'"))),
    }
}

/// Class name for an id, if valid.
pub fn class_name(id: u8) -> Option<&'static str> {
    CLASS_NAMES.get(id as usize).copied()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.input_size = 64;
        cfg.backbone_channels = 4;
        cfg.backbone_stride = 16;
        cfg.neck_channels = vec![3, 3, 3];
        cfg.neck_strides = vec![4, 8, 16];
        cfg
    }

    fn frame_with(objects: Vec<AnnotatedObject>) -> Frame {
        Frame {
            video_id: "v0".into(),
            index: 1,
            width: 64,
            height: 64,
            objects,
            seed: 42,
            pixels: None,
        }
    }

    fn car(x1: f64, y1: f64, x2: f64, y2: f64, conf: f64) -> AnnotatedObject {
        AnnotatedObject {
            bbox: BoundingBox::new(x1, y1, x2, y2).unwrap(),
            confidence: conf,
            class_id: 2,
        }
    }

    #[test]
    fn oracle_echoes_annotated_box() {
        let det = SyntheticDetector::new(&small_config()).unwrap();
        let out = det.detect(&frame_with(vec![car(8.0, 8.0, 24.0, 20.0, 0.9)])).unwrap();
        assert_eq!(out.detections.len(), 1);
        let b = out.detections[0].bbox;
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (8.0, 8.0, 24.0, 20.0));
        assert_eq!(out.detections[0].confidence, 0.9);
    }

    #[test]
    fn low_confidence_filtered() {
        let det = SyntheticDetector::new(&small_config()).unwrap();
        let out = det.detect(&frame_with(vec![car(8.0, 8.0, 24.0, 20.0, 0.05)])).unwrap();
        assert!(out.detections.is_empty());
    }

    #[test]
    fn cap_keeps_highest_confidence() {
        let objects: Vec<AnnotatedObject> = (0..30)
            .map(|i| car(1.0 + i as f64, 1.0, 10.0 + i as f64, 10.0, 0.2 + 0.02 * i as f64))
            .collect();
        let det = SyntheticDetector::new(&small_config()).unwrap();
        let out = det.detect(&frame_with(objects)).unwrap();
        assert_eq!(out.detections.len(), 20);
        // top confidence is from i = 29
        assert!((out.detections[0].confidence - 0.78).abs() < 1e-12);
        assert!(out
            .detections
            .windows(2)
            .all(|w| w[0].confidence >= w[1].confidence));
        assert!(out.detections.iter().all(|d| d.confidence > 0.2 + 0.02 * 9.0 - 1e-12));
    }

    #[test]
    fn zero_sized_frame_rejected() {
        let det = SyntheticDetector::new(&small_config()).unwrap();
        let mut frame = frame_with(vec![]);
        frame.width = 0;
        assert_eq!(det.detect(&frame).unwrap_err().kind(), "invalid-input");
    }

    #[test]
    fn feature_dims_follow_strides() {
        let det = SyntheticDetector::new(&small_config()).unwrap();
        let out = det.detect(&frame_with(vec![car(8.0, 8.0, 24.0, 20.0, 0.9)])).unwrap();
        assert_eq!(out.backbone.stride, 16);
        assert_eq!((out.backbone.height(), out.backbone.width()), (4, 4));
        let strides: Vec<usize> = out.neck.iter().map(|m| m.stride).collect();
        assert_eq!(strides, vec![4, 8, 16]);
        for m in &out.neck {
            assert_eq!(m.height(), 64usize.div_ceil(m.stride));
        }
    }

    #[test]
    fn synthesis_is_pure() {
        let shapes = FeatureShapeSpec {
            input_size: 64,
            backbone: (4, 16),
            neck: vec![(3, 4), (3, 8)],
        };
        let boxes = vec![BoundingBox::new(5.0, 5.0, 30.0, 40.0).unwrap()];
        let (b1, n1) = synthesize_features(&boxes, 9, &shapes).unwrap();
        let (b2, n2) = synthesize_features(&boxes, 9, &shapes).unwrap();
        assert_eq!(b1.values, b2.values);
        for (a, b) in n1.iter().zip(n2.iter()) {
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn no_boxes_means_background_only() {
        let shapes = FeatureShapeSpec {
            input_size: 64,
            backbone: (4, 16),
            neck: vec![(3, 4)],
        };
        let (b, _) = synthesize_features(&[], 3, &shapes).unwrap();
        let max = b.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(max < NOISE_AMPLITUDE + 1e-12);
        assert!(b.values.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn left_half_box_activates_left_half() {
        let shapes = FeatureShapeSpec {
            input_size: 64,
            backbone: (4, 16),
            neck: vec![(3, 4), (3, 8), (3, 16)],
        };
        let boxes = vec![BoundingBox::new(0.0, 0.0, 32.0, 64.0).unwrap()];
        let (b, neck) = synthesize_features(&boxes, 11, &shapes).unwrap();
        for map in std::iter::once(&b).chain(neck.iter()) {
            let (c, h, w) = map.values.dim();
            let half = w / 2;
            let mut left = 0.0;
            let mut right = 0.0;
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..half {
                        left += map.values[(ci, y, x)];
                    }
                    for x in half..w {
                        right += map.values[(ci, y, x)];
                    }
                }
            }
            assert!(
                left / (half * h * c) as f64 > right / ((w - half) * h * c) as f64,
                "stride {} failed: left {left}, right {right}",
                map.stride
            );
        }
    }

    #[test]
    fn empty_shape_spec_rejected() {
        let shapes = FeatureShapeSpec {
            input_size: 64,
            backbone: (4, 16),
            neck: vec![],
        };
        let err = synthesize_features(&[], 0, &shapes).unwrap_err();
        assert_eq!(err.kind(), "invalid-config");
    }

    #[test]
    fn external_backend_missing_dir_unavailable() {
        let mut cfg = small_config();
        cfg.backend = "external".into();
        cfg.external_dump_dir = Some("/nonexistent/dumps".into());
        assert_eq!(
            ExternalDetector::new(&cfg).unwrap_err().kind(),
            "backend-unavailable"
        );
    }

    /// Round-trips a fabricated dump through the external adapter. Run by
    /// hand when wiring a real detector: `cargo test -- --ignored external`.
    #[test]
    #[ignore]
    fn external_backend_smoke() {
        let dir = std::env::temp_dir().join("rare-external-smoke");
        let vdir = dir.join("v0");
        std::fs::create_dir_all(&vdir).unwrap();
        let dump = DetectorDump {
            detections: vec![Detection {
                bbox: BoundingBox::new(1.0, 2.0, 5.0, 8.0).unwrap(),
                confidence: 0.7,
                class_id: 2,
            }],
            backbone: FeatureDump {
                stride: 16,
                channels: 2,
                height: 4,
                width: 4,
                values: vec![0.5; 32],
            },
            neck: vec![FeatureDump {
                stride: 8,
                channels: 2,
                height: 8,
                width: 8,
                values: vec![0.25; 128],
            }],
        };
        std::fs::write(
            vdir.join("frame_00001.json"),
            serde_json::to_string(&dump).unwrap(),
        )
        .unwrap();

        let mut cfg = small_config();
        cfg.backend = "external".into();
        cfg.external_dump_dir = Some(dir.to_string_lossy().into_owned());
        let det = ExternalDetector::new(&cfg).unwrap();
        let out = det.detect(&frame_with(vec![])).unwrap();
        assert_eq!(out.detections.len(), 1);
        assert_eq!(out.backbone.stride, 16);
        std::fs::remove_dir_all(&dir).ok();
    }
}
