//! Trajectory overlays: observed track as red dots, ground truth in white,
//! generated trajectories as colored polylines and sampled goals as yellow dots.

use std::path::Path;

use crate::dataset::{ObservationWindow, Scene};
use crate::error::Result;
use crate::pipeline::Prediction;
use crate::raster::{resize_bilinear, save_rgb_png, RgbImage};
use crate::render::{draw_prompt, ArrowPath, PromptColor, PromptShape, VisualPromptStyle};
use crate::Vec2;

fn blend(img: &mut RgbImage, mask: &ndarray::Array2<f32>, color: [f32; 3], alpha: f32) {
    for ((r, c), &m) in mask.indexed_iter() {
        if m > 0.0 {
            let a = alpha * m.min(1.0);
            for k in 0..3 {
                img[(r, c, k)] = (1.0 - a) * img[(r, c, k)] + a * color[k];
            }
        }
    }
}

fn stroke(img: &mut RgbImage, pts: &[Vec2], color: [f32; 3], points: bool, width: f32) -> Result<()> {
    let (h, w, _) = img.dim();
    let distinct = pts.windows(2).any(|p| p[0] != p[1]);
    let style = VisualPromptStyle {
        color: PromptColor::Red,
        shape: if points || !distinct { PromptShape::Points } else { PromptShape::Arrow },
        alpha: 1.0,
        line_width: width,
        arrowhead_size: width * 2.5,
        point_radius: width,
        arrow_path: ArrowPath::Polyline,
    };
    let layer = draw_prompt(pts, &style, h, w)?;
    blend(img, &layer.mask, color, 0.9);
    Ok(())
}

fn palette(k: usize) -> [f32; 3] {
    let hue = (k as f32 * 0.618_034).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    match hue as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Renders one prediction over the scene image enlarged by `scale`.
pub fn render_prediction(
    scene: &Scene,
    window: &ObservationWindow,
    prediction: &Prediction,
    scale: usize,
) -> Result<RgbImage> {
    let scale = scale.max(1);
    let (h, w) = (scene.height() * scale, scene.width() * scale);
    let mut img = resize_bilinear(&scene.image, h, w);
    let s = scale as f64;
    let to_px = |p: &Vec2| -> Result<Vec2> {
        let q = scene.homography.world_to_pixel(*p)?;
        Ok([q[0] * s, q[1] * s])
    };
    let i = window
        .index_of(prediction.pedestrian_id)
        .ok_or_else(|| crate::Error::Reference(format!("pedestrian {} not in window", prediction.pedestrian_id)))?;
    let width = (s as f32 * 0.5).max(1.0);
    for (k, t) in prediction.trajectories.iter().enumerate() {
        let mut pts = vec![to_px(&window.current_position(i))?];
        for p in &t.world {
            pts.push(to_px(p)?);
        }
        stroke(&mut img, &pts, palette(k), false, width * 0.6)?;
    }
    let gt: Vec<Vec2> = window.future[i].iter().map(to_px).collect::<Result<_>>()?;
    stroke(&mut img, &gt, [1.0, 1.0, 1.0], true, width * 0.6)?;
    let past: Vec<Vec2> = window.past[i].iter().map(to_px).collect::<Result<_>>()?;
    stroke(&mut img, &past, [1.0, 0.0, 0.0], true, width)?;
    let goals: Vec<Vec2> = prediction.goals.iter().map(|g| [g.pixel[0] * s, g.pixel[1] * s]).collect();
    if !goals.is_empty() {
        stroke(&mut img, &goals, [1.0, 0.9, 0.0], true, width * 1.2)?;
    }
    Ok(img)
}

pub fn save_prediction_plot(
    path: &Path,
    scene: &Scene,
    window: &ObservationWindow,
    prediction: &Prediction,
    scale: usize,
) -> Result<()> {
    save_rgb_png(&render_prediction(scene, window, prediction, scale)?, path)
}
