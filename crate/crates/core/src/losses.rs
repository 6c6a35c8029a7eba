//! Training objective: attention-score ranking loss with IoU label
//! assignment, time-weighted binary cross-entropy for positive videos, and
//! the combined total.

use ndarray::Array1;

use crate::autodiff::{Tape, Var};
use crate::data::{VideoAnnotation, VideoLabel};
use crate::detector::BoundingBox;
use crate::error::{Error, Result};

/// Probability clamp used by every cross-entropy term.
pub const BCE_EPS: f64 = 1e-7;

/// Per-detection accident flags for one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLabels {
    pub flags: Vec<bool>,
}

impl AttentionLabels {
    pub fn num_positive(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }

    pub fn num_negative(&self) -> usize {
        self.flags.len() - self.num_positive()
    }

    /// Frames need at least one accident and one non-accident box for the
    /// ranking loss to say anything.
    pub fn is_rankable(&self) -> bool {
        self.num_positive() > 0 && self.num_negative() > 0
    }
}

/// Components of the combined objective; `total = adalea + gamma * ranking`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub adalea: f64,
    pub ranking: f64,
    pub gamma: f64,
    pub margin: f64,
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Flag each detected box as accident-related iff its best IoU against the
/// ground-truth accident boxes strictly exceeds `threshold`.
pub fn assign_attention_labels(
    detected: &[BoundingBox],
    gt_accident: &[BoundingBox],
    threshold: f64,
) -> AttentionLabels {
    let flags = detected
        .iter()
        .map(|d| {
            gt_accident
                .iter()
                .map(|g| iou(d, g))
                .fold(0.0, f64::max)
                > threshold
        })
        .collect();
    AttentionLabels { flags }
}

/// Attention score ranking hinge on a tape.
///
/// With both accident and non-accident boxes present:
/// `max(0, max(S_na) + m - min(S_a))`, so the loss is zero exactly when every
/// accident box outscores every non-accident box by the margin. Either side
/// empty contributes nothing. `literal` restores the published form with the
/// outer `max` replaced by `min` (non-positive; kept only for comparison).
pub fn ranking_loss_t(
    tape: &mut Tape,
    scores: Var,
    labels: &AttentionLabels,
    margin: f64,
    literal: bool,
) -> Result<Var> {
    let n = tape.value(scores).len();
    if n != labels.flags.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores but {} labels",
            n,
            labels.flags.len()
        )));
    }
    if !labels.is_rankable() {
        return Ok(tape.scalar(0.0));
    }
    let pos_idx: Vec<usize> = (0..n).filter(|&i| labels.flags[i]).collect();
    let neg_idx: Vec<usize> = (0..n).filter(|&i| !labels.flags[i]).collect();
    let pos = tape.gather(scores, &pos_idx);
    let neg = tape.gather(scores, &neg_idx);
    let min_pos = tape.reduce_min(pos);
    let max_neg = tape.reduce_max(neg);
    let gap = tape.sub(max_neg, min_pos);
    let hinge_arg = tape.add_const(gap, margin);
    if literal {
        // min(0, x) = -max(0, -x)
        let neg_arg = tape.scale(hinge_arg, -1.0);
        let relu = tape.relu(neg_arg);
        Ok(tape.scale(relu, -1.0))
    } else {
        Ok(tape.relu(hinge_arg))
    }
}

/// Value-level ranking loss.
pub fn ranking_loss(scores: &[f64], labels: &AttentionLabels, margin: f64) -> Result<f64> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("scores must be finite".into()));
    }
    let mut tape = Tape::new();
    let s = tape.constant(Array1::from_vec(scores.to_vec()).into_dyn());
    let loss = ranking_loss_t(&mut tape, s, labels, margin, false)?;
    Ok(tape.scalar_value(loss))
}

/// Per-frame weight of the early-anticipation objective.
///
/// Frames earlier than the model's current anticipation horizon
/// (`attc_prev + alpha` seconds before onset) are down-weighted
/// exponentially; everything inside the horizon gets full weight:
/// `w = exp(-max(0, (t_a - t)/fps - (attc_prev + alpha)))`.
pub fn adalea_weight(t: usize, t_a: usize, fps: f64, attc_prev: f64, alpha: f64) -> f64 {
    let seconds_before_onset = (t_a as f64 - t as f64) / fps;
    (-(seconds_before_onset - (attc_prev + alpha)).max(0.0)).exp()
}

/// Binary cross-entropy with probability clamping.
pub fn bce(p: f64, target: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Tape-level BCE against a constant target.
pub fn bce_t(tape: &mut Tape, p: Var, target: f64) -> Var {
    if target >= 0.5 {
        // -ln(p)
        let c = tape.clamp(p, BCE_EPS, 1.0 - BCE_EPS);
        let l = tape.ln(c);
        tape.scale(l, -1.0)
    } else {
        // -ln(1 - p)
        let om = tape.one_minus(p);
        let c = tape.clamp(om, BCE_EPS, 1.0 - BCE_EPS);
        let l = tape.ln(c);
        tape.scale(l, -1.0)
    }
}

/// Classification loss for one video's risk timeline (1-based frames).
///
/// Positive videos average `adalea_weight(t) * BCE(y_t, 1)` over frames;
/// negative videos average plain `BCE(y_t, 0)`.
pub fn video_loss(
    scores: &[f64],
    annotation: &VideoAnnotation,
    attc_prev: f64,
    alpha: f64,
) -> Result<f64> {
    if scores.len() != annotation.num_frames {
        return Err(Error::InvalidInput(format!(
            "{} scores for a {}-frame video",
            scores.len(),
            annotation.num_frames
        )));
    }
    match annotation.label {
        VideoLabel::Positive => {
            let t_a = annotation.accident_frame.ok_or_else(|| {
                Error::InvalidAnnotation(format!(
                    "positive video '{}' is missing its onset frame",
                    annotation.video_id
                ))
            })?;
            let sum: f64 = scores
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    adalea_weight(i + 1, t_a, annotation.fps, attc_prev, alpha) * bce(p, 1.0)
                })
                .sum();
            Ok(sum / scores.len() as f64)
        }
        VideoLabel::Negative => {
            let sum: f64 = scores.iter().map(|&p| bce(p, 0.0)).sum();
            Ok(sum / scores.len() as f64)
        }
    }
}

/// Combine the two objective terms.
pub fn total_loss(adalea: f64, ranking: f64, gamma: f64) -> Result<LossBreakdown> {
    if adalea < 0.0 || ranking < 0.0 || gamma < 0.0 {
        return Err(Error::InvalidInput(format!(
            "loss components must be non-negative (adalea={adalea}, ranking={ranking}, gamma={gamma})"
        )));
    }
    Ok(LossBreakdown {
        total: adalea + gamma * ranking,
        adalea,
        ranking,
        gamma,
        margin: 0.0,
    })
}

impl LossBreakdown {
    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    /// The defining identity of the breakdown, re-checked when logs are read.
    pub fn is_consistent(&self, tol: f64) -> bool {
        (self.total - (self.adalea + self.gamma * self.ranking)).abs() <= tol
    }
}
