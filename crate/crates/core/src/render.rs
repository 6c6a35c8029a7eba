//! Demo rendering: per-frame box overlays (top-attention box highlighted,
//! runner-up distinct, the rest plain) and a risk-curve plot with onset and
//! threshold markers.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::data::VideoSource;
use crate::detector::{BoundingBox, DetectorBackend};
use crate::error::{Error, Result};
use crate::model::RareModel;

const DETECTION_COLOR: Rgb<u8> = Rgb([40, 200, 60]);
const TOP_ATTENTION_COLOR: Rgb<u8> = Rgb([230, 40, 40]);
const SECOND_ATTENTION_COLOR: Rgb<u8> = Rgb([240, 160, 40]);
const CURVE_COLOR: Rgb<u8> = Rgb([40, 80, 220]);
const ONSET_COLOR: Rgb<u8> = Rgb([230, 40, 40]);
const THRESHOLD_COLOR: Rgb<u8> = Rgb([30, 30, 30]);

#[derive(Debug, Serialize, Deserialize)]
pub struct DemoManifest {
    pub schema_version: u32,
    pub video_id: String,
    pub overlay_count: usize,
    pub risk_curve: String,
    pub threshold: f64,
    pub accident_frame: Option<usize>,
    pub config: RunConfig,
}

fn draw_rect(img: &mut RgbImage, b: &BoundingBox, color: Rgb<u8>, thickness: u32) {
    let (w, h) = img.dimensions();
    let x1 = b.x1.max(0.0) as i64;
    let y1 = b.y1.max(0.0) as i64;
    let x2 = (b.x2.min(w as f64 - 1.0)) as i64;
    let y2 = (b.y2.min(h as f64 - 1.0)) as i64;
    if x1 >= x2 || y1 >= y2 {
        return;
    }
    for t in 0..thickness as i64 {
        for x in x1..=x2 {
            for &y in &[y1 + t, y2 - t] {
                if (0..h as i64).contains(&y) && (0..w as i64).contains(&x) {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
        for y in y1..=y2 {
            for &x in &[x1 + t, x2 - t] {
                if (0..h as i64).contains(&y) && (0..w as i64).contains(&x) {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
}

fn vertical_dashes(img: &mut RgbImage, x: u32, color: Rgb<u8>) {
    let h = img.height();
    let mut y = 0;
    while y < h {
        for dy in 0..4 {
            if y + dy < h {
                img.put_pixel(x, y + dy, color);
            }
        }
        y += 8;
    }
}

fn horizontal_dashes(img: &mut RgbImage, y: u32, color: Rgb<u8>) {
    let w = img.width();
    let mut x = 0;
    while x < w {
        for dx in 0..4 {
            if x + dx < w {
                img.put_pixel(x + dx, y, color);
            }
        }
        x += 8;
    }
}

fn draw_segment(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = x0 + (x1 - x0) * t;
        let y = y0 + (y1 - y0) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Plot the risk timeline: blue curve, dashed vertical onset marker, dashed
/// horizontal threshold line.
pub fn render_risk_curve(
    scores: &[f64],
    accident_frame: Option<usize>,
    threshold: f64,
    path: &Path,
) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("empty risk timeline".into()));
    }
    let (w, h) = (640u32, 240u32);
    let (ml, mr, mt, mb) = (40.0, 10.0, 10.0, 20.0); // margins
    let mut img = RgbImage::from_pixel(w, h, Rgb([252, 252, 252]));

    let plot_w = w as f64 - ml - mr;
    let plot_h = h as f64 - mt - mb;
    let x_of = |t: f64| ml + (t - 1.0) / (scores.len().max(2) as f64 - 1.0) * plot_w;
    let y_of = |s: f64| mt + (1.0 - s.clamp(0.0, 1.0)) * plot_h;

    // axes
    draw_segment(&mut img, ml, mt, ml, mt + plot_h, Rgb([120, 120, 120]));
    draw_segment(&mut img, ml, mt + plot_h, ml + plot_w, mt + plot_h, Rgb([120, 120, 120]));

    horizontal_dashes(&mut img, y_of(threshold) as u32, THRESHOLD_COLOR);
    if let Some(t_a) = accident_frame {
        vertical_dashes(&mut img, x_of(t_a as f64) as u32, ONSET_COLOR);
    }
    for t in 1..scores.len() {
        draw_segment(
            &mut img,
            x_of(t as f64),
            y_of(scores[t - 1]),
            x_of(t as f64 + 1.0),
            y_of(scores[t]),
            CURVE_COLOR,
        );
    }
    img.save(path)
        .map_err(|e| Error::InvalidInput(format!("cannot write '{}': {e}", path.display())))
}

/// Render the full demo for one video: an overlay image per frame plus one
/// risk-curve plot. Returns the manifest written alongside them.
pub fn render_demo(
    model: &RareModel,
    detector: &dyn DetectorBackend,
    source: &VideoSource,
    out_dir: &Path,
    threshold: f64,
    config: &RunConfig,
) -> Result<DemoManifest> {
    let run = model.infer_video(detector, source)?;
    let video_dir: PathBuf = out_dir.join("demo").join(&source.annotation.video_id);
    std::fs::create_dir_all(&video_dir)?;

    let (nw, nh) = source.frame_size();
    let sx = nw as f64 / model.input_size as f64;
    let sy = nh as f64 / model.input_size as f64;
    let attention = run.timeline.attention.as_ref().expect("always recorded");

    for t in 1..=source.num_frames() {
        let frame = source.frame_with_pixels(t)?;
        let mut img = frame.pixels.expect("pixels requested");
        let dets = &run.detections[t - 1];
        let scores = &attention[t - 1];

        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        // Plain detections first so the highlighted outlines stay on top.
        for (rank, &i) in order.iter().enumerate().rev() {
            let color = match rank {
                0 => TOP_ATTENTION_COLOR,
                1 => SECOND_ATTENTION_COLOR,
                _ => DETECTION_COLOR,
            };
            let native = dets[i].bbox.scaled(sx, sy);
            draw_rect(&mut img, &native, color, 2);
        }
        img.save(video_dir.join(format!("overlay_{t:05}.png")))
            .map_err(|e| Error::InvalidInput(format!("cannot write overlay: {e}")))?;
    }

    let curve_path = video_dir.join("risk_curve.png");
    render_risk_curve(
        &run.timeline.scores,
        source.annotation.accident_frame,
        threshold,
        &curve_path,
    )?;

    let manifest = DemoManifest {
        schema_version: SCHEMA_VERSION,
        video_id: source.annotation.video_id.clone(),
        overlay_count: source.num_frames(),
        risk_curve: curve_path.to_string_lossy().into_owned(),
        threshold,
        accident_frame: source.annotation.accident_frame,
        config: config.clone(),
    };
    std::fs::write(
        video_dir.join("demo_manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, load_dataset, Split};
    use crate::detector::make_detector;

    #[test]
    fn demo_emits_one_overlay_per_frame_and_one_curve() {
        let base = std::env::temp_dir().join(format!("rare-render-{}", std::process::id()));
        std::fs::remove_dir_all(&base).ok();
        let cfg = crate::model::tests::desk_config();
        let root = base.join("data");
        generate_synthetic(&root, &cfg.synthetic).unwrap();
        let videos = load_dataset(&root, Split::Train).unwrap();
        let positive = videos
            .iter()
            .find(|v| v.annotation.is_positive())
            .unwrap();
        let detector = make_detector(&cfg).unwrap();
        let model = RareModel::init(&cfg);

        let out = base.join("out");
        let manifest =
            render_demo(&model, detector.as_ref(), positive, &out, 0.5, &cfg).unwrap();
        let dir = out.join("demo").join(&manifest.video_id);
        let overlays = std::fs::read_dir(&dir)
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .starts_with("overlay_")
            })
            .count();
        assert_eq!(overlays, positive.num_frames());
        assert!(dir.join("risk_curve.png").is_file());

        // The onset marker draws red dashes in the curve image.
        let curve = image::open(dir.join("risk_curve.png")).unwrap().into_rgb8();
        let has_onset_red = curve
            .pixels()
            .any(|p| p.0 == [230, 40, 40]);
        assert!(has_onset_red, "onset marker missing from risk curve");
        std::fs::remove_dir_all(&base).ok();
    }
}
