//! Run configuration: defaults, TOML file loading, and `key=value` overrides.
//!
//! Precedence is overrides > file > defaults. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// The six object classes kept by the detector, ids 0..=5.
pub const CLASS_NAMES: [&str; 6] = ["person", "bicycle", "car", "motorcycle", "bus", "truck"];

fn default_input_size() -> u32 {
    640
}
fn default_confidence_threshold() -> f64 {
    0.1
}
fn default_allowed_classes() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}
fn default_n_max() -> usize {
    20
}
fn default_backend() -> String {
    "synthetic".to_string()
}
fn default_backbone_channels() -> usize {
    256
}
fn default_backbone_stride() -> usize {
    32
}
fn default_neck_channels() -> Vec<usize> {
    vec![256, 256, 256]
}
fn default_neck_strides() -> Vec<usize> {
    vec![8, 16, 32]
}
fn default_roi_size() -> usize {
    7
}
fn default_sampling_ratio() -> usize {
    2
}
fn default_box_embed_dim() -> usize {
    32
}
fn default_object_embed_dim() -> usize {
    256
}
fn default_cbam_reduction() -> usize {
    16
}
fn default_true() -> bool {
    true
}
fn default_scene_hidden_dim() -> usize {
    256
}
fn default_num_heads() -> usize {
    4
}
fn default_fused_dim() -> usize {
    256
}
fn default_queue_size() -> usize {
    10
}
fn default_classifier_hidden_dim() -> usize {
    128
}
fn default_margin() -> f64 {
    0.1
}
fn default_gamma() -> f64 {
    10.0
}
fn default_alpha() -> f64 {
    0.1
}
fn default_iou_threshold() -> f64 {
    0.5
}
fn default_learning_rate() -> f64 {
    5e-2
}
fn default_batch_size() -> usize {
    4
}
fn default_epochs() -> usize {
    30
}
fn default_optimizer() -> String {
    "momentum-sgd".to_string()
}
fn default_momentum() -> f64 {
    0.9
}
fn default_grad_clip() -> f64 {
    5.0
}
fn default_seed() -> u64 {
    0
}
fn default_output_dir() -> String {
    "out".to_string()
}
fn default_data_root() -> String {
    "data".to_string()
}
fn default_eval_split() -> String {
    "test".to_string()
}
fn default_bench_warmup() -> usize {
    50
}
fn default_bench_measured() -> usize {
    500
}
fn default_demo_threshold() -> f64 {
    0.5
}
fn default_synthetic() -> SyntheticConfig {
    SyntheticConfig::default()
}

fn default_num_videos() -> usize {
    24
}
fn default_frames_per_video() -> usize {
    32
}
fn default_synth_fps() -> f64 {
    10.0
}
fn default_frame_size() -> (u32, u32) {
    (128, 128)
}
fn default_synth_seed() -> u64 {
    7
}

/// Parameters of the deterministic synthetic collision dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "default_num_videos")]
    pub num_positive: usize,
    #[serde(default = "default_num_videos")]
    pub num_negative: usize,
    #[serde(default = "default_frames_per_video")]
    pub frames_per_video: usize,
    #[serde(default = "default_synth_fps")]
    pub fps: f64,
    #[serde(default = "default_frame_size")]
    pub frame_size: (u32, u32),
    #[serde(default = "default_synth_seed")]
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_positive: 24,
            num_negative: 24,
            frames_per_video: 32,
            fps: 10.0,
            frame_size: (128, 128),
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_positive == 0 || self.num_negative == 0 || self.frames_per_video == 0 {
            return Err(Error::InvalidConfig(
                "synthetic counts must be positive".into(),
            ));
        }
        if self.fps <= 0.0 {
            return Err(Error::InvalidConfig("synthetic fps must be > 0".into()));
        }
        if self.frame_size.0 < 64 || self.frame_size.1 < 64 {
            return Err(Error::GenerationError(format!(
                "frame size {}x{} too small to place objects (minimum 64x64)",
                self.frame_size.0, self.frame_size.1
            )));
        }
        Ok(())
    }
}

/// Every tunable of the pipeline. Flat on purpose: each key here is what the
/// individual components document as their config surface.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // detector
    #[serde(default = "default_input_size")]
    pub input_size: u32,
    #[serde(default = "default_confidence_threshold")]
    pub confidence_threshold: f64,
    #[serde(default = "default_allowed_classes")]
    pub allowed_classes: Vec<String>,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default = "default_backbone_channels")]
    pub backbone_channels: usize,
    #[serde(default = "default_backbone_stride")]
    pub backbone_stride: usize,
    #[serde(default = "default_neck_channels")]
    pub neck_channels: Vec<usize>,
    #[serde(default = "default_neck_strides")]
    pub neck_strides: Vec<usize>,
    /// Directory of per-frame dumps for the external detector adapter.
    #[serde(default)]
    pub external_dump_dir: Option<String>,

    // object encoder
    #[serde(default = "default_roi_size")]
    pub roi_size: usize,
    #[serde(default = "default_sampling_ratio")]
    pub sampling_ratio: usize,
    #[serde(default = "default_box_embed_dim")]
    pub box_embed_dim: usize,
    #[serde(default = "default_object_embed_dim")]
    pub object_embed_dim: usize,
    #[serde(default = "default_cbam_reduction")]
    pub cbam_reduction: usize,
    /// Ablation toggle: pool RoI features from the backbone map.
    #[serde(default = "default_true")]
    pub roi_use_backbone: bool,
    /// Ablation toggle: pool RoI features from the neck maps.
    #[serde(default = "default_true")]
    pub roi_use_neck: bool,

    // scene encoder
    #[serde(default = "default_scene_hidden_dim")]
    pub scene_hidden_dim: usize,

    // fusion
    #[serde(default = "default_num_heads")]
    pub num_heads: usize,
    #[serde(default = "default_fused_dim")]
    pub fused_dim: usize,

    // anticipation head
    #[serde(default = "default_queue_size")]
    pub queue_size: usize,
    #[serde(default = "default_classifier_hidden_dim")]
    pub classifier_hidden_dim: usize,

    // losses
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_iou_threshold")]
    pub iou_threshold: f64,
    /// Keep the published hinge form (min instead of max) for comparison runs.
    #[serde(default)]
    pub literal_eq5: bool,

    // training
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Global-norm gradient clip; 0 disables.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    /// Serial data order and single-threaded math; required for reproducible runs.
    #[serde(default = "default_true")]
    pub deterministic: bool,

    // data / commands
    #[serde(default = "default_data_root")]
    pub data_root: String,
    #[serde(default = "default_eval_split")]
    pub eval_split: String,
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default)]
    pub demo_video: Option<String>,
    #[serde(default = "default_demo_threshold")]
    pub demo_threshold: f64,

    // latency benchmark
    #[serde(default = "default_bench_warmup")]
    pub bench_warmup: usize,
    #[serde(default = "default_bench_measured")]
    pub bench_measured: usize,

    #[serde(default = "default_synthetic")]
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults are total")
    }
}

impl RunConfig {
    /// Parse a TOML document, falling back to defaults for absent keys.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Load with `key=value` overrides applied on top of the file (which in
    /// turn is applied on top of defaults). Values are parsed as TOML
    /// literals, falling back to bare strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for ov in overrides {
            let (key, raw) = ov.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("override '{ov}' is not of the form key=value"))
            })?;
            let value = parse_override_value(raw);
            insert_dotted(&mut table, key.trim(), value)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::InvalidConfig("input_size must be positive".into()));
        }
        if self.backend != "synthetic" && self.backend != "external" {
            return Err(Error::InvalidConfig(format!(
                "backend must be 'synthetic' or 'external', got '{}'",
                self.backend
            )));
        }
        for c in &self.allowed_classes {
            if !CLASS_NAMES.contains(&c.as_str()) {
                return Err(Error::InvalidConfig(format!("unknown class '{c}'")));
            }
        }
        if self.neck_channels.len() != self.neck_strides.len() {
            return Err(Error::InvalidConfig(
                "neck_channels and neck_strides must have the same length".into(),
            ));
        }
        if self.neck_strides.is_empty() {
            return Err(Error::InvalidConfig("neck must have at least one scale".into()));
        }
        if !self.neck_strides.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(
                "neck_strides must be strictly increasing".into(),
            ));
        }
        if !self.roi_use_backbone && !self.roi_use_neck {
            return Err(Error::InvalidConfig(
                "at least one of roi_use_backbone / roi_use_neck must be enabled".into(),
            ));
        }
        if self.roi_size == 0 || self.sampling_ratio == 0 {
            return Err(Error::InvalidConfig(
                "roi_size and sampling_ratio must be >= 1".into(),
            ));
        }
        if self.fused_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "fused_dim {} must be divisible by num_heads {}",
                self.fused_dim, self.num_heads
            )));
        }
        if self.queue_size == 0 {
            return Err(Error::InvalidConfig("queue_size must be >= 1".into()));
        }
        if self.margin < 0.0 || self.gamma < 0.0 || self.alpha < 0.0 {
            return Err(Error::InvalidConfig(
                "margin, gamma and alpha must be non-negative".into(),
            ));
        }
        if self.optimizer != "momentum-sgd" {
            return Err(Error::InvalidConfig(format!(
                "unsupported optimizer '{}'",
                self.optimizer
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.bench_measured == 0 {
            return Err(Error::InvalidConfig("bench_measured must be >= 1".into()));
        }
        self.synthetic.validate()?;
        Ok(())
    }

    /// Numeric ids of the allowed classes.
    pub fn allowed_class_ids(&self) -> Vec<u8> {
        self.allowed_classes
            .iter()
            .filter_map(|name| {
                CLASS_NAMES
                    .iter()
                    .position(|c| c == name)
                    .map(|i| i as u8)
            })
            .collect()
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    // A bare word like `synthetic` is not valid TOML; quote it.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn insert_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut current = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            current.insert(part.to_string(), value);
            return Ok(());
        }
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::InvalidConfig(format!("override key '{key}' crosses a non-table value"))
            })?;
    }
    Ok(())
}
