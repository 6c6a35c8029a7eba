//! Video-level evaluation: precision/recall over a threshold sweep, average
//! precision, and time-to-accident statistics.
//!
//! Protocol (video-level anticipation): a positive video counts as a true
//! positive at threshold `q` iff its score first reaches `q` at or before the
//! onset frame. A positive that only fires after onset, and any negative that
//! fires at all, count as false positives. Thresholds sweep every distinct
//! score observed in the dataset.

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::data::VideoAnnotation;
use crate::error::{Error, Result};
use crate::losses::AttentionLabels;

pub const METRICS_PROTOCOL_VERSION: u32 = 1;

/// Per-frame risk scores for one video, plus optional attention traces for
/// rendering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskTimeline {
    pub video_id: String,
    /// `scores[t-1]` is the risk emitted at 1-based frame `t`.
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<Vec<f64>>>,
}

/// One swept operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    /// Mean seconds of anticipation over true-positive videos; absent when
    /// nothing fires in time at this threshold.
    pub tta: Option<f64>,
}

/// First 1-based frame whose score reaches `q`.
pub fn fire_time(scores: &[f64], q: f64) -> Option<usize> {
    scores.iter().position(|&s| s >= q).map(|i| i + 1)
}

/// Sweep every distinct observed score as a threshold, in descending order
/// (so recall is non-decreasing along the returned list).
pub fn pr_points(dataset: &[(RiskTimeline, VideoAnnotation)]) -> Result<Vec<PrPoint>> {
    let num_pos = dataset.iter().filter(|(_, a)| a.is_positive()).count();
    if num_pos == 0 {
        return Err(Error::UndefinedRecall);
    }
    for (tl, ann) in dataset {
        if tl.scores.len() != ann.num_frames {
            return Err(Error::InvalidInput(format!(
                "timeline for '{}' has {} scores for {} frames",
                tl.video_id,
                tl.scores.len(),
                ann.num_frames
            )));
        }
    }

    let mut thresholds: Vec<f64> = dataset
        .iter()
        .flat_map(|(tl, _)| tl.scores.iter().copied())
        .collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    let mut points = Vec::with_capacity(thresholds.len());
    for q in thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fne = 0usize;
        let mut tta_sum = 0.0;
        for (tl, ann) in dataset {
            let fire = fire_time(&tl.scores, q);
            if ann.is_positive() {
                let t_a = ann.accident_frame.expect("validated positive");
                match fire {
                    Some(t) if t <= t_a => {
                        tp += 1;
                        tta_sum += (t_a - t) as f64 / ann.fps;
                    }
                    Some(_) => {
                        // Fired only after the accident started.
                        fp += 1;
                        fne += 1;
                    }
                    None => fne += 1,
                }
            } else if fire.is_some() {
                fp += 1;
            }
        }
        let precision = if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = tp as f64 / (tp + fne) as f64;
        points.push(PrPoint {
            threshold: q,
            precision,
            recall,
            tta: if tp > 0 { Some(tta_sum / tp as f64) } else { None },
        });
    }
    Ok(points)
}

/// Area under the precision-recall curve with monotone interpolation.
///
/// `points` must be sorted by non-decreasing recall (as returned by
/// [`pr_points`]). Each precision is replaced by the maximum precision at
/// equal-or-higher recall before summing `(R_i - R_{i-1}) * P_i` with
/// `R_0 = 0`.
pub fn average_precision(points: &[PrPoint]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidInput("no PR points".into()));
    }
    let n = points.len();
    let mut envelope = vec![0.0; n];
    let mut best: f64 = 0.0;
    for i in (0..n).rev() {
        best = best.max(points[i].precision);
        envelope[i] = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in points.iter().zip(envelope.iter()) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    Ok(ap)
}

/// Mean TTA over every threshold that produced at least one true positive.
/// Returns `(0.0, true)` when no threshold does.
pub fn mtta(points: &[PrPoint]) -> (f64, bool) {
    let ttas: Vec<f64> = points.iter().filter_map(|p| p.tta).collect();
    if ttas.is_empty() {
        (0.0, true)
    } else {
        (ttas.iter().sum::<f64>() / ttas.len() as f64, false)
    }
}

/// Mean anticipation seconds at one fixed threshold (used for the per-epoch
/// AdaLEA horizon refresh). Videos that never fire in time contribute
/// nothing; returns 0 when none fire.
pub fn mean_tta_at(dataset: &[(RiskTimeline, VideoAnnotation)], q: f64) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (tl, ann) in dataset {
        if !ann.is_positive() {
            continue;
        }
        let t_a = ann.accident_frame.expect("validated positive");
        if let Some(t) = fire_time(&tl.scores, q) {
            if t <= t_a {
                sum += (t_a - t) as f64 / ann.fps;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Fraction of rankable frames whose top-attention box is accident-related.
pub fn attention_ranking_rate(frames: &[(Vec<f64>, AttentionLabels)]) -> Option<f64> {
    let mut eligible = 0usize;
    let mut hits = 0usize;
    for (scores, labels) in frames {
        if scores.len() != labels.flags.len() || !labels.is_rankable() {
            continue;
        }
        eligible += 1;
        let mut arg = 0usize;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[arg] {
                arg = i;
            }
        }
        if labels.flags[arg] {
            hits += 1;
        }
    }
    if eligible == 0 {
        None
    } else {
        Some(hits as f64 / eligible as f64)
    }
}

/// The metrics document emitted by evaluation runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub protocol_version: u32,
    pub ap: f64,
    pub mtta: f64,
    /// Set when no swept threshold produced a true positive.
    pub mtta_no_tp: bool,
    pub num_videos: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_ranking_rate: Option<f64>,
    pub points: Vec<PrPoint>,
    pub config: RunConfig,
}

impl MetricsReport {
    pub fn from_results(
        dataset: &[(RiskTimeline, VideoAnnotation)],
        attention_rate: Option<f64>,
        config: &RunConfig,
    ) -> Result<Self> {
        let points = pr_points(dataset)?;
        let ap = average_precision(&points)?;
        let (mtta_value, no_tp) = mtta(&points);
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            protocol_version: METRICS_PROTOCOL_VERSION,
            ap,
            mtta: mtta_value,
            mtta_no_tp: no_tp,
            num_videos: dataset.len(),
            attention_ranking_rate: attention_rate,
            points,
            config: config.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VideoLabel;

    fn positive(id: &str, scores: Vec<f64>, t_a: usize, fps: f64) -> (RiskTimeline, VideoAnnotation) {
        let n = scores.len();
        (
            RiskTimeline {
                video_id: id.into(),
                scores,
                attention: None,
            },
            VideoAnnotation {
                video_id: id.into(),
                label: VideoLabel::Positive,
                fps,
                num_frames: n,
                accident_frame: Some(t_a),
                frames: vec![],
            },
        )
    }

    fn negative(id: &str, scores: Vec<f64>, fps: f64) -> (RiskTimeline, VideoAnnotation) {
        let n = scores.len();
        (
            RiskTimeline {
                video_id: id.into(),
                scores,
                attention: None,
            },
            VideoAnnotation {
                video_id: id.into(),
                label: VideoLabel::Negative,
                fps,
                num_frames: n,
                accident_frame: None,
                frames: vec![],
            },
        )
    }

    #[test]
    fn fire_time_examples() {
        assert_eq!(fire_time(&[0.1, 0.6, 0.9], 0.5), Some(2));
        assert_eq!(fire_time(&[0.1, 0.2], 0.5), None);
        assert_eq!(fire_time(&[0.0, 0.3], 0.0), Some(1));
    }

    #[test]
    fn perfect_separation_reaches_ap_one() {
        let dataset = vec![
            positive("p0", vec![0.1, 0.9, 0.9, 0.9], 3, 20.0),
            positive("p1", vec![0.9, 0.9, 0.9, 0.9], 2, 20.0),
            negative("n0", vec![0.1, 0.1, 0.1, 0.1], 20.0),
        ];
        let points = pr_points(&dataset).unwrap();
        assert!(points
            .iter()
            .any(|p| p.precision == 1.0 && p.recall == 1.0));
        assert_eq!(average_precision(&points).unwrap(), 1.0);
    }

    #[test]
    fn tta_of_forty_frames_at_twenty_fps_is_two_seconds() {
        let mut scores = vec![0.1; 60];
        for s in scores.iter_mut().skip(9) {
            *s = 0.9;
        }
        // Fires at frame 10, onset at frame 50.
        let dataset = vec![
            positive("p0", scores, 50, 20.0),
            negative("n0", vec![0.1; 60], 20.0),
        ];
        let points = pr_points(&dataset).unwrap();
        let at_09 = points.iter().find(|p| p.threshold == 0.9).unwrap();
        assert_eq!(at_09.tta, Some(2.0));
    }

    #[test]
    fn late_firing_positive_is_a_false_positive() {
        // Fires only after onset: counts against precision and recall.
        let mut scores = vec![0.1; 10];
        scores[8] = 0.9; // frame 9, onset at 5
        let dataset = vec![
            positive("p0", scores, 5, 10.0),
            positive("p1", vec![0.9; 10], 5, 10.0),
        ];
        let points = pr_points(&dataset).unwrap();
        let at_09 = points.iter().find(|p| p.threshold == 0.9).unwrap();
        assert_eq!(at_09.recall, 0.5);
        assert_eq!(at_09.precision, 0.5);
    }

    #[test]
    fn single_point_ap_is_its_precision() {
        let points = vec![PrPoint {
            threshold: 0.5,
            precision: 0.75,
            recall: 1.0,
            tta: Some(1.0),
        }];
        assert_eq!(average_precision(&points).unwrap(), 0.75);
        assert_eq!(
            average_precision(&[]).unwrap_err().kind(),
            "invalid-input"
        );
    }

    #[test]
    fn mtta_averages_thresholds() {
        let mk = |tta| PrPoint {
            threshold: 0.5,
            precision: 1.0,
            recall: 1.0,
            tta,
        };
        let (v, warn) = mtta(&[mk(Some(1.0)), mk(Some(3.0)), mk(None)]);
        assert_eq!(v, 2.0);
        assert!(!warn);
        let (v, warn) = mtta(&[mk(None)]);
        assert_eq!(v, 0.0);
        assert!(warn);
        let (v, warn) = mtta(&[mk(Some(2.0))]);
        assert_eq!(v, 2.0);
        assert!(!warn);
    }

    #[test]
    fn no_positive_videos_is_undefined_recall() {
        let dataset = vec![negative("n0", vec![0.4, 0.2], 10.0)];
        assert_eq!(pr_points(&dataset).unwrap_err().kind(), "undefined-recall");
    }

    #[test]
    fn recall_non_increasing_with_threshold_and_bounds_hold() {
        let dataset = vec![
            positive("p0", vec![0.2, 0.5, 0.8, 0.3], 4, 10.0),
            positive("p1", vec![0.6, 0.1, 0.9, 0.9], 3, 10.0),
            negative("n0", vec![0.3, 0.45, 0.2, 0.05], 10.0),
            negative("n1", vec![0.0, 0.1, 0.15, 0.7], 10.0),
        ];
        let points = pr_points(&dataset).unwrap();
        // Listed in descending threshold order -> recall non-decreasing.
        for w in points.windows(2) {
            assert!(w[0].threshold > w[1].threshold);
            assert!(w[0].recall <= w[1].recall);
        }
        let ap = average_precision(&points).unwrap();
        assert!((0.0..=1.0).contains(&ap));
        for p in &points {
            if let Some(t) = p.tta {
                assert!(t >= 0.0);
            }
        }
    }

    #[test]
    fn monotone_rescaling_preserves_ap_and_pr_set() {
        let dataset = vec![
            positive("p0", vec![0.2, 0.5, 0.8, 0.3], 4, 10.0),
            positive("p1", vec![0.6, 0.1, 0.9, 0.9], 3, 10.0),
            negative("n0", vec![0.3, 0.45, 0.2, 0.05], 10.0),
        ];
        let transform = |s: f64| (s * s + 0.1 * s) / 1.1; // strictly increasing on [0, 1]
        let mapped: Vec<(RiskTimeline, VideoAnnotation)> = dataset
            .iter()
            .map(|(tl, ann)| {
                (
                    RiskTimeline {
                        video_id: tl.video_id.clone(),
                        scores: tl.scores.iter().map(|&s| transform(s)).collect(),
                        attention: None,
                    },
                    ann.clone(),
                )
            })
            .collect();
        let base = pr_points(&dataset).unwrap();
        let moved = pr_points(&mapped).unwrap();
        assert_eq!(base.len(), moved.len());
        for (a, b) in base.iter().zip(moved.iter()) {
            assert_eq!(a.precision, b.precision);
            assert_eq!(a.recall, b.recall);
            assert_eq!(a.tta, b.tta);
        }
        assert_eq!(
            average_precision(&base).unwrap(),
            average_precision(&moved).unwrap()
        );
    }

    #[test]
    fn ranking_rate_counts_only_rankable_frames() {
        let lab = |flags: &[bool]| AttentionLabels { flags: flags.to_vec() };
        let frames = vec![
            (vec![0.6, 0.4], lab(&[true, false])),  // hit
            (vec![0.3, 0.7], lab(&[true, false])),  // miss
            (vec![0.5, 0.5], lab(&[true, true])),   // not rankable
            (vec![0.9], lab(&[false])),             // not rankable
        ];
        assert_eq!(attention_ranking_rate(&frames), Some(0.5));
        assert_eq!(attention_ranking_rate(&[]), None);
    }
}
