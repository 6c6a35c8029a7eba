//! Training loop: video-level batches, gradients through time over each
//! video's tape, momentum SGD, and the per-epoch anticipation-horizon
//! refresh that drives the early-anticipation weights.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::data::{load_dataset, Split, VideoSource};
use crate::detector::make_detector;
use crate::error::{Error, Result};
use crate::losses::{adalea_weight, bce_t, ranking_loss_t, total_loss, LossBreakdown};
use crate::metrics::{attention_ranking_rate, average_precision, mean_tta_at, mtta, pr_points};
use crate::model::{FrameStepT, RareModel};
use crate::params::{GradBuffer, SgdMomentum};

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub schema_version: u32,
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Horizon (train-set mean TTA at threshold 0.5) used by the NEXT epoch.
    pub attc: f64,
    pub train_ap: f64,
    pub train_mtta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_ranking_rate: Option<f64>,
}

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub history: Vec<EpochRecord>,
    pub final_loss: LossBreakdown,
}

/// Scalar objective for one video on its tape. Returns the combined loss
/// node plus the two component values for reporting.
fn video_objective_t(
    tape: &mut Tape,
    steps: &[FrameStepT],
    source: &VideoSource,
    cfg: &RunConfig,
    attc_prev: f64,
) -> Result<(Var, f64, f64)> {
    let ann = &source.annotation;
    let mut bce_terms = Vec::with_capacity(steps.len());
    for (i, step) in steps.iter().enumerate() {
        let t = i + 1;
        let term = if ann.is_positive() {
            let t_a = ann.accident_frame.ok_or_else(|| {
                Error::InvalidAnnotation(format!(
                    "positive video '{}' is missing its onset frame",
                    ann.video_id
                ))
            })?;
            let w = adalea_weight(t, t_a, ann.fps, attc_prev, cfg.alpha);
            let b = bce_t(tape, step.risk, 1.0);
            tape.scale(b, w)
        } else {
            bce_t(tape, step.risk, 0.0)
        };
        bce_terms.push(term);
    }
    let sum = tape.add_n(&bce_terms);
    let adalea = tape.scale(sum, 1.0 / steps.len() as f64);

    let mut ranking_terms = Vec::new();
    for step in steps {
        if let (Some(scores), Some(labels)) = (step.scores, step.labels.as_ref()) {
            if labels.is_rankable() {
                ranking_terms.push(ranking_loss_t(
                    tape,
                    scores,
                    labels,
                    cfg.margin,
                    cfg.literal_eq5,
                )?);
            }
        }
    }
    let ranking = if ranking_terms.is_empty() {
        tape.scalar(0.0)
    } else {
        let s = tape.add_n(&ranking_terms);
        tape.scale(s, 1.0 / ranking_terms.len() as f64)
    };

    let weighted = tape.scale(ranking, cfg.gamma);
    let combined = tape.add(adalea, weighted);
    Ok((
        combined,
        tape.scalar_value(adalea),
        tape.scalar_value(ranking),
    ))
}

/// Train from scratch on the `train` split under `cfg.data_root`; emits a
/// JSONL epoch log and a checkpoint (refreshed every epoch) under
/// `cfg.output_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let videos = load_dataset(Path::new(&cfg.data_root), Split::Train)?;
    if videos.is_empty() {
        return Err(Error::MissingData("train split is empty".into()));
    }
    let detector = make_detector(cfg)?;
    let mut model = RareModel::init(cfg);
    let mut optimizer = SgdMomentum::new(&model.store, cfg.learning_rate, cfg.momentum);
    let mut grads = GradBuffer::zeros_like(&model.store);

    let out_dir = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&out_dir)?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::fs::File::create(&log_path)?;
    let checkpoint_path = out_dir.join("checkpoint.json");

    let mut attc = 0.0;
    let mut history: Vec<EpochRecord> = Vec::new();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..videos.len()).collect();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        order.shuffle(&mut epoch_rng);

        let mut sum_adalea = 0.0;
        let mut sum_ranking = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.zero();
            for &vi in batch {
                let source = &videos[vi];
                let mut tape = Tape::new();
                let steps = model.forward_video_t(&mut tape, detector.as_ref(), source)?;
                let (loss, adalea_val, ranking_val) =
                    video_objective_t(&mut tape, &steps, source, cfg, attc)?;
                let g = tape.backward_scaled(loss, 1.0 / batch.len() as f64);
                tape.accumulate_param_grads(&g, &mut grads);
                sum_adalea += adalea_val;
                sum_ranking += ranking_val;
            }
            if cfg.grad_clip > 0.0 {
                grads.clip_global_norm(cfg.grad_clip);
            }
            optimizer.step(&mut model.store, &grads);
        }

        let eval = model.evaluate_videos(detector.as_ref(), &videos)?;
        attc = mean_tta_at(&eval.results, 0.5);
        let points = pr_points(&eval.results)?;
        let train_ap = average_precision(&points)?;
        let (train_mtta, _) = mtta(&points);
        let rate = attention_ranking_rate(&eval.attention_frames);

        let n = videos.len() as f64;
        let loss = total_loss(sum_adalea / n, sum_ranking / n, cfg.gamma)?.with_margin(cfg.margin);
        let record = EpochRecord {
            schema_version: SCHEMA_VERSION,
            epoch,
            loss,
            attc,
            train_ap,
            train_mtta,
            attention_ranking_rate: rate,
        };
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
        history.push(record);

        let ckpt = Checkpoint::from_model(&model, cfg, epoch, attc, history.clone());
        save_checkpoint(&checkpoint_path, &ckpt)?;
    }

    let final_loss = history
        .last()
        .map(|r| r.loss)
        .ok_or_else(|| Error::InvalidConfig("epochs must be >= 1".into()))?;
    Ok(TrainOutcome {
        checkpoint_path,
        log_path,
        history,
        final_loss,
    })
}

/// Parse a training log, re-checking the loss identity of every record.
pub fn read_train_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EpochRecord = serde_json::from_str(line)?;
        if !record.loss.is_consistent(1e-9) {
            return Err(Error::InvalidInput(format!(
                "log line {}: total {} != adalea {} + gamma {} * ranking {}",
                i + 1,
                record.loss.total,
                record.loss.adalea,
                record.loss.gamma,
                record.loss.ranking
            )));
        }
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SyntheticConfig;
    use crate::data::generate_synthetic;

    fn tiny_cfg(root: &Path, out: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.input_size = 96;
        cfg.backbone_channels = 6;
        cfg.backbone_stride = 32;
        cfg.neck_channels = vec![6, 6];
        cfg.neck_strides = vec![8, 16];
        cfg.roi_size = 3;
        cfg.sampling_ratio = 2;
        cfg.box_embed_dim = 6;
        cfg.object_embed_dim = 16;
        cfg.cbam_reduction = 3;
        cfg.scene_hidden_dim = 16;
        cfg.fused_dim = 16;
        cfg.num_heads = 2;
        cfg.queue_size = 4;
        cfg.classifier_hidden_dim = 12;
        cfg.epochs = 2;
        cfg.batch_size = 2;
        cfg.learning_rate = 0.02;
        cfg.data_root = root.to_string_lossy().into_owned();
        cfg.output_dir = out.to_string_lossy().into_owned();
        cfg.synthetic = SyntheticConfig {
            num_positive: 2,
            num_negative: 2,
            frames_per_video: 8,
            fps: 10.0,
            frame_size: (96, 96),
            seed: 5,
        };
        cfg
    }

    #[test]
    fn two_epochs_produce_log_checkpoint_and_consistent_losses() {
        let base = std::env::temp_dir().join(format!("rare-train-{}", std::process::id()));
        std::fs::remove_dir_all(&base).ok();
        let root = base.join("data");
        let out = base.join("out");
        let cfg = tiny_cfg(&root, &out);
        generate_synthetic(&root, &cfg.synthetic).unwrap();

        let outcome = train(&cfg).unwrap();
        assert_eq!(outcome.history.len(), 2);
        assert!(outcome.final_loss.total.is_finite());

        let records = read_train_log(&outcome.log_path).unwrap();
        assert_eq!(records.len(), 2);
        for r in &records {
            assert!(r.loss.is_consistent(1e-9));
            assert!((0.0..=1.0).contains(&r.train_ap));
        }

        let ckpt = crate::checkpoint::load_checkpoint(&outcome.checkpoint_path).unwrap();
        assert_eq!(ckpt.epoch, 2);
        assert_eq!(ckpt.metric_history.len(), 2);
        std::fs::remove_dir_all(&base).ok();
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let base = std::env::temp_dir().join(format!("rare-train-det-{}", std::process::id()));
        std::fs::remove_dir_all(&base).ok();
        let root = base.join("data");
        let cfg_a = {
            let mut c = tiny_cfg(&root, &base.join("out_a"));
            c.epochs = 2;
            c
        };
        generate_synthetic(&root, &cfg_a.synthetic).unwrap();
        let cfg_b = {
            let mut c = cfg_a.clone();
            c.output_dir = base.join("out_b").to_string_lossy().into_owned();
            c
        };
        let a = train(&cfg_a).unwrap();
        let b = train(&cfg_b).unwrap();
        assert!((a.final_loss.total - b.final_loss.total).abs() < 1e-6);
        assert_eq!(
            a.history.last().unwrap().train_ap,
            b.history.last().unwrap().train_ap
        );
        std::fs::remove_dir_all(&base).ok();
    }
}
