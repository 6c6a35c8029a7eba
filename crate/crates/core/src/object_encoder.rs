//! Object-level feature extraction: multi-scale RoI Align over the detector's
//! reused maps, CBAM refinement, and the box-coordinate embedding head.

use ndarray::{Array1, Array3, ArrayD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::RunConfig;
use crate::detector::{BoundingBox, DetectionOutput, FeatureMap};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, zeros_vec, ParamId, ParamStore};

/// Fixed-size feature patch pooled for one box at one or more scales.
#[derive(Debug, Clone)]
pub struct RoIPatch {
    /// `channels x P x P`.
    pub values: Array3<f64>,
    /// Strides of the maps this patch was pooled from.
    pub source_scales: Vec<usize>,
}

/// Final per-object embedding.
#[derive(Debug, Clone)]
pub struct ObjectEmbedding {
    pub values: Array1<f64>,
    /// `(x1, y1, x2, y2)` normalized to `[0, 1]` by the frame size.
    pub box_norm: [f64; 4],
}

/// Bilinear read at continuous `(y, x)` in cell-index coordinates.
///
/// Sample points more than one cell outside the map read as zero; points
/// within the extended border clamp to the edge cells.
fn bilinear(map: &Array3<f64>, c: usize, y: f64, x: f64, h: usize, w: usize) -> f64 {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return 0.0;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let mut y_low = y as usize;
    let mut x_low = x as usize;
    let (y_high, ly);
    if y_low >= h - 1 {
        y_low = h - 1;
        y_high = h - 1;
        ly = 0.0;
    } else {
        y_high = y_low + 1;
        ly = y - y_low as f64;
    }
    let (x_high, lx);
    if x_low >= w - 1 {
        x_low = w - 1;
        x_high = w - 1;
        lx = 0.0;
    } else {
        x_high = x_low + 1;
        lx = x - x_low as f64;
    }
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    hy * hx * map[(c, y_low, x_low)]
        + hy * lx * map[(c, y_low, x_high)]
        + ly * hx * map[(c, y_high, x_low)]
        + ly * lx * map[(c, y_high, x_high)]
}

/// RoI Align: pool `map` inside `bbox` into an `out_size x out_size` grid.
///
/// The box is mapped into feature coordinates by dividing by the map stride
/// (no rounding). Each bin is averaged over `sampling_ratio^2` regularly
/// spaced bilinear samples.
pub fn roi_align(
    map: &FeatureMap,
    bbox: &BoundingBox,
    out_size: usize,
    sampling_ratio: usize,
) -> Result<Array3<f64>> {
    if out_size == 0 || sampling_ratio == 0 {
        return Err(Error::InvalidInput(
            "out_size and sampling_ratio must be >= 1".into(),
        ));
    }
    let stride = map.stride as f64;
    let x1 = bbox.x1 / stride;
    let y1 = bbox.y1 / stride;
    let roi_w = (bbox.x2 - bbox.x1) / stride;
    let roi_h = (bbox.y2 - bbox.y1) / stride;
    if roi_w <= 0.0 || roi_h <= 0.0 {
        return Err(Error::DegenerateBox(format!(
            "box ({}, {}, {}, {}) has no extent at stride {}",
            bbox.x1, bbox.y1, bbox.x2, bbox.y2, map.stride
        )));
    }
    let (c, h, w) = map.values.dim();
    let bin_w = roi_w / out_size as f64;
    let bin_h = roi_h / out_size as f64;
    let norm = (sampling_ratio * sampling_ratio) as f64;

    let mut out = Array3::<f64>::zeros((c, out_size, out_size));
    for ph in 0..out_size {
        for pw in 0..out_size {
            for iy in 0..sampling_ratio {
                let sy = y1 + ph as f64 * bin_h + (iy as f64 + 0.5) * bin_h / sampling_ratio as f64;
                for ix in 0..sampling_ratio {
                    let sx = x1
                        + pw as f64 * bin_w
                        + (ix as f64 + 0.5) * bin_w / sampling_ratio as f64;
                    for ci in 0..c {
                        out[(ci, ph, pw)] += bilinear(&map.values, ci, sy, sx, h, w);
                    }
                }
            }
        }
    }
    out.mapv_inplace(|v| v / norm);
    Ok(out)
}

/// CBAM parameters: shared channel MLP plus the 7x7 spatial convolution.
pub struct CbamParams {
    pub channels: usize,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
    conv_w: ParamId,
    conv_b: ParamId,
}

impl CbamParams {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        Self {
            channels,
            mlp_w1: store.add("cbam.mlp_w1", xavier_uniform(rng, hidden, channels)),
            mlp_b1: store.add("cbam.mlp_b1", zeros_vec(hidden)),
            mlp_w2: store.add("cbam.mlp_w2", xavier_uniform(rng, channels, hidden)),
            mlp_b2: store.add("cbam.mlp_b2", zeros_vec(channels)),
            conv_w: store.add("cbam.conv_w", {
                let limit = (6.0 / (2.0 * 49.0 + 49.0) as f64).sqrt();
                ArrayD::from_shape_fn(ndarray::IxDyn(&[1, 2, 7, 7]), |_| {
                    rng.random_range(-limit..limit)
                })
            }),
            conv_b: store.add("cbam.conv_b", zeros_vec(1)),
        }
    }

    fn shared_mlp(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w1 = tape.param(store, self.mlp_w1);
        let b1 = tape.param(store, self.mlp_b1);
        let w2 = tape.param(store, self.mlp_w2);
        let b2 = tape.param(store, self.mlp_b2);
        let h = tape.affine(w1, b1, x);
        let h = tape.relu(h);
        tape.affine(w2, b2, h)
    }

    /// Channel attention then spatial attention, both multiplicative.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(Error::InvalidShape(format!(
                "cbam expects ({}, P, P), got {:?}",
                self.channels, shape
            )));
        }
        let (h, w) = (shape[1], shape[2]);

        let avg_c = tape.spatial_mean(x);
        let max_c = tape.spatial_max(x);
        let a = self.shared_mlp(tape, store, avg_c);
        let m = self.shared_mlp(tape, store, max_c);
        let gate_sum = tape.add(a, m);
        let gate_c = tape.sigmoid(gate_sum);
        let x1 = tape.mul_channel_gate(x, gate_c);

        let avg_map = tape.channel_mean(x1);
        let max_map = tape.channel_max(x1);
        let stacked = tape.stack2_maps(avg_map, max_map);
        let cw = tape.param(store, self.conv_w);
        let cb = tape.param(store, self.conv_b);
        let conv = tape.conv2d_same(stacked, cw, cb);
        let flat = tape.reshape(conv, &[h, w]);
        let gate_s = tape.sigmoid(flat);
        Ok(tape.mul_spatial_gate(x1, gate_s))
    }

    /// Value-level application (runs the same graph on a throwaway tape).
    pub fn apply(&self, store: &ParamStore, patch: &Array3<f64>) -> Result<Array3<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(patch.clone().into_dyn());
        let y = self.forward(&mut tape, store, x)?;
        Ok(tape
            .value(y)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap())
    }
}

/// Embedding head: pooled patch + embedded box coordinates -> `D_o` vector.
pub struct EmbedParams {
    pub in_channels: usize,
    pub out_dim: usize,
    box_w: ParamId,
    box_b: ParamId,
    head_w1: ParamId,
    head_b1: ParamId,
    head_w2: ParamId,
    head_b2: ParamId,
}

impl EmbedParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        box_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            in_channels,
            out_dim,
            box_w: store.add("embed.box_w", xavier_uniform(rng, box_dim, 4)),
            box_b: store.add("embed.box_b", zeros_vec(box_dim)),
            head_w1: store.add(
                "embed.head_w1",
                xavier_uniform(rng, out_dim, in_channels + box_dim),
            ),
            head_b1: store.add("embed.head_b1", zeros_vec(out_dim)),
            head_w2: store.add("embed.head_w2", xavier_uniform(rng, out_dim, out_dim)),
            head_b2: store.add("embed.head_b2", zeros_vec(out_dim)),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        refined_patch: Var,
        box_norm: [f64; 4],
    ) -> Result<Var> {
        let shape = tape.value(refined_patch).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::InvalidShape(format!(
                "embed head expects ({}, P, P), got {:?}",
                self.in_channels, shape
            )));
        }
        let pooled = tape.spatial_mean(refined_patch);
        let coords = tape.constant_vec(&box_norm);
        let bw = tape.param(store, self.box_w);
        let bb = tape.param(store, self.box_b);
        let box_vec = tape.affine(bw, bb, coords);
        let cat = tape.concat(&[pooled, box_vec]);
        let w1 = tape.param(store, self.head_w1);
        let b1 = tape.param(store, self.head_b1);
        let h = tape.affine(w1, b1, cat);
        let h = tape.relu(h);
        let w2 = tape.param(store, self.head_w2);
        let b2 = tape.param(store, self.head_b2);
        Ok(tape.affine(w2, b2, h))
    }
}

/// Full object encoder: pooling config plus CBAM and embedding parameters.
pub struct ObjectEncoder {
    pub roi_size: usize,
    pub sampling_ratio: usize,
    pub use_backbone: bool,
    pub use_neck: bool,
    /// Strides expected in a pooled patch list, in pooling order.
    pub expected_scales: Vec<usize>,
    pub cbam: CbamParams,
    pub embed: EmbedParams,
}

impl ObjectEncoder {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &RunConfig) -> Self {
        let mut expected_scales = Vec::new();
        let mut channels = 0;
        if cfg.roi_use_backbone {
            expected_scales.push(cfg.backbone_stride);
            channels += cfg.backbone_channels;
        }
        if cfg.roi_use_neck {
            expected_scales.extend(cfg.neck_strides.iter().copied());
            channels += cfg.neck_channels.iter().sum::<usize>();
        }
        Self {
            roi_size: cfg.roi_size,
            sampling_ratio: cfg.sampling_ratio,
            use_backbone: cfg.roi_use_backbone,
            use_neck: cfg.roi_use_neck,
            expected_scales,
            cbam: CbamParams::init(store, rng, channels, cfg.cbam_reduction),
            embed: EmbedParams::init(
                store,
                rng,
                channels,
                cfg.box_embed_dim,
                cfg.object_embed_dim,
            ),
        }
    }

    /// Pool one patch per enabled scale for `bbox`.
    pub fn pool_patches(&self, output: &DetectionOutput, bbox: &BoundingBox) -> Result<Vec<RoIPatch>> {
        let mut patches = Vec::new();
        if self.use_backbone {
            patches.push(RoIPatch {
                values: roi_align(&output.backbone, bbox, self.roi_size, self.sampling_ratio)?,
                source_scales: vec![output.backbone.stride],
            });
        }
        if self.use_neck {
            for map in &output.neck {
                patches.push(RoIPatch {
                    values: roi_align(map, bbox, self.roi_size, self.sampling_ratio)?,
                    source_scales: vec![map.stride],
                });
            }
        }
        Ok(patches)
    }

    /// Channel-concatenate per-scale patches, checking that every expected
    /// scale is present exactly once, in order.
    pub fn concat_patches(&self, patches: &[RoIPatch]) -> Result<Array3<f64>> {
        let got: Vec<usize> = patches
            .iter()
            .flat_map(|p| p.source_scales.iter().copied())
            .collect();
        if got != self.expected_scales {
            return Err(Error::InvalidInput(format!(
                "patch scales {:?} do not match expected {:?}",
                got, self.expected_scales
            )));
        }
        let views: Vec<_> = patches.iter().map(|p| p.values.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::InvalidShape(e.to_string()))
    }

    /// Tape-level embedding of one object given its pooled patches.
    pub fn embed_object_t(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        patches: &[RoIPatch],
        bbox: &BoundingBox,
        frame_size: (f64, f64),
    ) -> Result<Var> {
        let concat = self.concat_patches(patches)?;
        let x = tape.constant(concat.into_dyn());
        let refined = self.cbam.forward(tape, store, x)?;
        let box_norm = normalize_box(bbox, frame_size);
        self.embed.forward(tape, store, refined, box_norm)
    }

    /// Value-level embedding: CBAM-refine, pool, and project.
    pub fn embed_object(
        &self,
        store: &ParamStore,
        patches: &[RoIPatch],
        bbox: &BoundingBox,
        frame_size: (f64, f64),
    ) -> Result<ObjectEmbedding> {
        let mut tape = Tape::new();
        let out = self.embed_object_t(&mut tape, store, patches, bbox, frame_size)?;
        Ok(ObjectEmbedding {
            values: tape
                .value(out)
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap(),
            box_norm: normalize_box(bbox, frame_size),
        })
    }
}

pub fn normalize_box(bbox: &BoundingBox, frame_size: (f64, f64)) -> [f64; 4] {
    [
        bbox.x1 / frame_size.0,
        bbox.y1 / frame_size.1,
        bbox.x2 / frame_size.0,
        bbox.y2 / frame_size.1,
    ]
}
