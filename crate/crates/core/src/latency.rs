//! Wall-clock latency harness for the per-frame pipeline.
//!
//! Frames run strictly serially on one stream; the monotonic clock is read
//! immediately around each pipeline step, warm-up frames are discarded, and
//! `fps` is defined as `1000 / mean_ms`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::SCHEMA_VERSION;
use crate::detector::Frame;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyReport {
    pub schema_version: u32,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub fps: f64,
    pub warmup: usize,
    pub measured: usize,
    pub hardware: String,
    pub config_summary: String,
    pub per_frame_ms: Vec<f64>,
}

fn percentile_nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Summarize per-frame samples (milliseconds).
pub fn summarize(
    per_frame_ms: Vec<f64>,
    warmup: usize,
    hardware: String,
    config_summary: String,
) -> Result<LatencyReport> {
    if per_frame_ms.is_empty() {
        return Err(Error::InvalidInput("no timing samples".into()));
    }
    let measured = per_frame_ms.len();
    let mean_ms = per_frame_ms.iter().sum::<f64>() / measured as f64;
    let mut sorted = per_frame_ms.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median_ms = if measured % 2 == 1 {
        sorted[measured / 2]
    } else {
        0.5 * (sorted[measured / 2 - 1] + sorted[measured / 2])
    };
    Ok(LatencyReport {
        schema_version: SCHEMA_VERSION,
        mean_ms,
        median_ms,
        p95_ms: percentile_nearest_rank(&sorted, 0.95),
        p99_ms: percentile_nearest_rank(&sorted, 0.99),
        fps: 1000.0 / mean_ms,
        warmup,
        measured,
        hardware,
        config_summary,
        per_frame_ms,
    })
}

pub fn hardware_description() -> String {
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    format!("{} {}, {} logical cores", std::env::consts::OS, std::env::consts::ARCH, cores)
}

/// Run `step` over `warmup + measured` frames, cycling `frames` as needed,
/// and time each call after the warm-up window.
pub fn benchmark<F>(
    mut step: F,
    frames: &[Frame],
    warmup: usize,
    measured: usize,
    config_summary: String,
) -> Result<LatencyReport>
where
    F: FnMut(&Frame) -> Result<()>,
{
    if frames.is_empty() {
        return Err(Error::InvalidInput("benchmark needs at least one frame".into()));
    }
    if measured == 0 {
        return Err(Error::InvalidInput("measured must be >= 1".into()));
    }
    let mut samples = Vec::with_capacity(measured);
    for i in 0..warmup + measured {
        let frame = &frames[i % frames.len()];
        let start = Instant::now();
        let outcome = step(frame);
        let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        if let Err(e) = outcome {
            return Err(Error::BenchmarkAborted {
                completed: samples.len(),
                partial_ms: samples,
                message: e.to_string(),
            });
        }
        if i >= warmup {
            samples.push(elapsed_ms);
        }
    }
    summarize(samples, warmup, hardware_description(), config_summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy_frame() -> Frame {
        Frame {
            video_id: "bench".into(),
            index: 1,
            width: 8,
            height: 8,
            objects: vec![],
            seed: 0,
            pixels: None,
        }
    }

    #[test]
    fn constant_samples_give_exact_fps() {
        let report = summarize(vec![10.0; 7], 0, "test".into(), "cfg".into()).unwrap();
        assert_eq!(report.fps, 100.0);
        assert_eq!(report.mean_ms, 10.0);
        assert_eq!(report.median_ms, 10.0);
        assert_eq!(report.p95_ms, 10.0);
        assert_eq!(report.p99_ms, 10.0);
    }

    #[test]
    fn fps_is_inverse_mean_to_machine_precision() {
        let samples: Vec<f64> = (1..=100).map(|i| 0.3 + (i as f64) * 0.01).collect();
        let report = summarize(samples, 0, "t".into(), "c".into()).unwrap();
        let rel = (report.fps - 1000.0 / report.mean_ms).abs() / report.fps;
        assert!(rel < 1e-9);
    }

    #[test]
    fn sample_count_excludes_warmup() {
        let frames = vec![dummy_frame(), dummy_frame(), dummy_frame()];
        let report = benchmark(|_| Ok(()), &frames, 5, 20, String::new()).unwrap();
        assert_eq!(report.per_frame_ms.len(), 20);
        assert_eq!(report.measured, 20);
        assert_eq!(report.warmup, 5);
    }

    #[test]
    fn failure_mid_run_reports_partial_data() {
        let frames = vec![dummy_frame()];
        let mut calls = 0;
        let err = benchmark(
            |_| {
                calls += 1;
                if calls > 7 {
                    Err(Error::InvalidInput("boom".into()))
                } else {
                    Ok(())
                }
            },
            &frames,
            2,
            20,
            String::new(),
        )
        .unwrap_err();
        match err {
            Error::BenchmarkAborted { completed, partial_ms, .. } => {
                assert_eq!(completed, 5);
                assert_eq!(partial_ms.len(), 5);
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn percentiles_use_nearest_rank() {
        let sorted: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(percentile_nearest_rank(&sorted, 0.95), 95.0);
        assert_eq!(percentile_nearest_rank(&sorted, 0.99), 99.0);
        assert_eq!(percentile_nearest_rank(&[42.0], 0.95), 42.0);
    }
}
