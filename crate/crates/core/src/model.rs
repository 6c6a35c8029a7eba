//! Full anticipation model: detector features -> object embeddings -> scene
//! state -> attention fusion -> queued classifier, wired for both training
//! (one tape per video, gradients through time) and streaming inference.

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::RunConfig;
use crate::data::{VideoAnnotation, VideoSource};
use crate::detector::{BoundingBox, Detection, DetectorBackend, Frame};
use crate::error::Result;
use crate::fusion::MhaParams;
use crate::head::{ClassifierParams, FeatureQueue, RiskScore};
use crate::losses::{assign_attention_labels, AttentionLabels};
use crate::metrics::RiskTimeline;
use crate::object_encoder::ObjectEncoder;
use crate::params::ParamStore;
use crate::scene::{pool_backbone, GruParams, SceneState};

pub struct RareModel {
    pub store: ParamStore,
    pub encoder: ObjectEncoder,
    pub gru: GruParams,
    pub mha: MhaParams,
    pub classifier: ClassifierParams,
    pub input_size: u32,
    pub iou_threshold: f64,
}

impl RareModel {
    /// Seeded initialization; construction order fixes the parameter layout.
    pub fn init(cfg: &RunConfig) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let encoder = ObjectEncoder::init(&mut store, &mut rng, cfg);
        let gru = GruParams::init(&mut store, &mut rng, cfg.backbone_channels, cfg.scene_hidden_dim);
        let mha = MhaParams::init(
            &mut store,
            &mut rng,
            cfg.scene_hidden_dim,
            cfg.object_embed_dim,
            cfg.fused_dim,
            cfg.num_heads,
        );
        let classifier = ClassifierParams::init(
            &mut store,
            &mut rng,
            cfg.queue_size,
            cfg.fused_dim,
            cfg.classifier_hidden_dim,
        );
        Self {
            store,
            encoder,
            gru,
            mha,
            classifier,
            input_size: cfg.input_size,
            iou_threshold: cfg.iou_threshold,
        }
    }

    fn frame_size_in_input_coords(&self) -> (f64, f64) {
        (self.input_size as f64, self.input_size as f64)
    }

    /// Attention supervision for one frame: flags per detection, or `None`
    /// when the annotation does not say which boxes are accident-related.
    pub fn frame_attention_labels(
        &self,
        detections: &[Detection],
        annotation: &VideoAnnotation,
        t: usize,
        native_size: (u32, u32),
    ) -> Option<AttentionLabels> {
        let accident = annotation.accident_boxes(t)?;
        let sx = self.input_size as f64 / native_size.0 as f64;
        let sy = self.input_size as f64 / native_size.1 as f64;
        let bound = self.input_size as f64;
        let scaled: Vec<BoundingBox> = accident
            .iter()
            .filter_map(|b| b.scaled(sx, sy).clamped(bound, bound).ok())
            .collect();
        let det_boxes: Vec<BoundingBox> = detections.iter().map(|d| d.bbox).collect();
        Some(assign_attention_labels(&det_boxes, &scaled, self.iou_threshold))
    }
}

/// One frame of a training forward pass.
pub struct FrameStepT {
    pub risk: Var,
    /// Attention scores over the frame's detections (absent when none).
    pub scores: Option<Var>,
    pub labels: Option<AttentionLabels>,
}

impl RareModel {
    /// Forward a whole video on one tape, threading the scene state and the
    /// feature queue through time so backward reaches every frame.
    pub fn forward_video_t(
        &self,
        tape: &mut Tape,
        detector: &dyn DetectorBackend,
        source: &VideoSource,
    ) -> Result<Vec<FrameStepT>> {
        let mut hidden = tape.zeros(&[self.gru.hidden_dim]);
        let zero_slot = tape.zeros(&[self.mha.fused_dim]);
        let mut queue: FeatureQueue<Var> = FeatureQueue::new(self.classifier.queue_size);
        let mut steps = Vec::with_capacity(source.num_frames());

        for t in 1..=source.num_frames() {
            let frame = source.frame(t);
            let output = detector.detect(&frame)?;

            let pooled = pool_backbone(&output.backbone);
            let pooled = tape.constant(pooled.into_dyn());
            hidden = self.gru.step_t(tape, &self.store, pooled, hidden)?;

            let mut objects = Vec::with_capacity(output.detections.len());
            for det in &output.detections {
                let patches = self.encoder.pool_patches(&output, &det.bbox)?;
                let emb = self.encoder.embed_object_t(
                    tape,
                    &self.store,
                    &patches,
                    &det.bbox,
                    self.frame_size_in_input_coords(),
                )?;
                objects.push(emb);
            }

            let (fused, scores) = if objects.is_empty() {
                let fused = self.mha.fuse_empty_t(tape, &self.store, hidden)?;
                (fused, None)
            } else {
                let (fused, scores) = self.mha.fuse_t(tape, &self.store, hidden, &objects)?;
                (fused, Some(scores))
            };
            queue.push(fused);
            let slots = queue.slots(&zero_slot);
            let risk = self.classifier.forward_t(tape, &self.store, &slots)?;

            let labels = self.frame_attention_labels(
                &output.detections,
                &source.annotation,
                t,
                source.frame_size(),
            );
            steps.push(FrameStepT {
                risk,
                scores,
                labels,
            });
        }
        Ok(steps)
    }
}

/// Per-frame inference output.
pub struct FrameResult {
    pub risk: RiskScore,
    pub attention: Vec<f64>,
    pub detections: Vec<Detection>,
}

/// Strictly serial single-stream runner; owns the recurrent state.
pub struct StreamRunner<'a> {
    model: &'a RareModel,
    detector: &'a dyn DetectorBackend,
    state: SceneState,
    queue: FeatureQueue<Array1<f64>>,
}

impl<'a> StreamRunner<'a> {
    pub fn new(model: &'a RareModel, detector: &'a dyn DetectorBackend) -> Self {
        Self {
            model,
            detector,
            state: SceneState::initial(model.gru.hidden_dim),
            queue: FeatureQueue::new(model.classifier.queue_size),
        }
    }

    /// Reset recurrent state between videos.
    pub fn reset(&mut self) {
        self.state = SceneState::initial(self.model.gru.hidden_dim);
        self.queue = FeatureQueue::new(self.model.classifier.queue_size);
    }

    pub fn process(&mut self, frame: &Frame) -> Result<FrameResult> {
        let model = self.model;
        let output = self.detector.detect(frame)?;
        let pooled = pool_backbone(&output.backbone);
        self.state = model.gru.scene_step(&model.store, &self.state, &pooled)?;

        let mut embeddings = Vec::with_capacity(output.detections.len());
        for det in &output.detections {
            let patches = model.encoder.pool_patches(&output, &det.bbox)?;
            embeddings.push(model.encoder.embed_object(
                &model.store,
                &patches,
                &det.bbox,
                model.frame_size_in_input_coords(),
            )?);
        }
        let fusion = if embeddings.is_empty() {
            model.mha.fuse_empty(&model.store, &self.state)?
        } else {
            model.mha.fuse(&model.store, &self.state, &embeddings)?
        };
        let (queue, risk) = model.classifier.push_and_classify(
            &model.store,
            &self.queue,
            fusion.fused.clone(),
            frame.index,
        )?;
        self.queue = queue;
        Ok(FrameResult {
            risk,
            attention: fusion.scores,
            detections: output.detections,
        })
    }
}

/// Inference over one video from its first frame.
pub struct VideoRunResult {
    pub timeline: RiskTimeline,
    pub detections: Vec<Vec<Detection>>,
}

impl RareModel {
    pub fn infer_video(
        &self,
        detector: &dyn DetectorBackend,
        source: &VideoSource,
    ) -> Result<VideoRunResult> {
        let mut runner = StreamRunner::new(self, detector);
        let mut scores = Vec::with_capacity(source.num_frames());
        let mut attention = Vec::with_capacity(source.num_frames());
        let mut detections = Vec::with_capacity(source.num_frames());
        for t in 1..=source.num_frames() {
            let frame = source.frame(t);
            let out = runner.process(&frame)?;
            scores.push(out.risk.value);
            attention.push(out.attention);
            detections.push(out.detections);
        }
        Ok(VideoRunResult {
            timeline: RiskTimeline {
                video_id: source.annotation.video_id.clone(),
                scores,
                attention: Some(attention),
            },
            detections,
        })
    }

    /// Evaluate a split: risk timelines plus attention supervision outcomes
    /// for the ranking-rate metric.
    pub fn evaluate_videos(
        &self,
        detector: &dyn DetectorBackend,
        videos: &[VideoSource],
    ) -> Result<EvalRun> {
        let mut results = Vec::with_capacity(videos.len());
        let mut attention_frames = Vec::new();
        for source in videos {
            let run = self.infer_video(detector, source)?;
            if source.annotation.is_positive() {
                let per_frame = run.timeline.attention.as_ref().expect("always recorded");
                for t in 1..=source.num_frames() {
                    if let Some(labels) = self.frame_attention_labels(
                        &run.detections[t - 1],
                        &source.annotation,
                        t,
                        source.frame_size(),
                    ) {
                        attention_frames.push((per_frame[t - 1].clone(), labels));
                    }
                }
            }
            results.push((run.timeline, source.annotation.clone()));
        }
        Ok(EvalRun {
            results,
            attention_frames,
        })
    }
}

pub struct EvalRun {
    pub results: Vec<(RiskTimeline, VideoAnnotation)>,
    /// `(scores, labels)` for every positive-video frame with known
    /// accident boxes.
    pub attention_frames: Vec<(Vec<f64>, AttentionLabels)>,
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::SyntheticConfig;
    use crate::data::{generate_synthetic, load_dataset, Split};
    use crate::detector::make_detector;

    pub(crate) fn desk_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.input_size = 128;
        cfg.backbone_channels = 8;
        cfg.backbone_stride = 32;
        cfg.neck_channels = vec![8, 8, 8];
        cfg.neck_strides = vec![8, 16, 32];
        cfg.roi_size = 5;
        cfg.sampling_ratio = 2;
        cfg.box_embed_dim = 8;
        cfg.object_embed_dim = 24;
        cfg.cbam_reduction = 4;
        cfg.scene_hidden_dim = 24;
        cfg.fused_dim = 24;
        cfg.num_heads = 4;
        cfg.queue_size = 6;
        cfg.classifier_hidden_dim = 16;
        cfg.synthetic = SyntheticConfig {
            num_positive: 2,
            num_negative: 2,
            frames_per_video: 10,
            fps: 10.0,
            frame_size: (128, 128),
            seed: 3,
        };
        cfg
    }

    #[test]
    fn training_forward_and_inference_agree() {
        let root = std::env::temp_dir().join(format!("rare-model-{}", std::process::id()));
        std::fs::remove_dir_all(&root).ok();
        let cfg = desk_config();
        generate_synthetic(&root, &cfg.synthetic).unwrap();
        let videos = load_dataset(&root, Split::Train).unwrap();
        let detector = make_detector(&cfg).unwrap();
        let model = RareModel::init(&cfg);

        let source = &videos[0];
        let mut tape = Tape::new();
        let steps = model.forward_video_t(&mut tape, detector.as_ref(), source).unwrap();
        let train_scores: Vec<f64> = steps.iter().map(|s| tape.scalar_value(s.risk)).collect();

        let run = model.infer_video(detector.as_ref(), source).unwrap();
        assert_eq!(train_scores.len(), run.timeline.scores.len());
        for (a, b) in train_scores.iter().zip(run.timeline.scores.iter()) {
            assert!(
                (a - b).abs() < 1e-9,
                "training and inference paths disagree: {a} vs {b}"
            );
        }
        for s in &run.timeline.scores {
            assert!((0.0..=1.0).contains(s));
        }
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn positive_videos_carry_attention_supervision() {
        let root = std::env::temp_dir().join(format!("rare-model2-{}", std::process::id()));
        std::fs::remove_dir_all(&root).ok();
        let cfg = desk_config();
        generate_synthetic(&root, &cfg.synthetic).unwrap();
        let videos = load_dataset(&root, Split::Train).unwrap();
        let detector = make_detector(&cfg).unwrap();
        let model = RareModel::init(&cfg);

        let eval = model.evaluate_videos(detector.as_ref(), &videos).unwrap();
        assert_eq!(eval.results.len(), videos.len());
        // The collision pair overlaps its own annotation boxes at IoU 1, so
        // rankable frames must exist.
        assert!(eval
            .attention_frames
            .iter()
            .any(|(_, labels)| labels.is_rankable()));
        std::fs::remove_dir_all(&root).ok();
    }
}
