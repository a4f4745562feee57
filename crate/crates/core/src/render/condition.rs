use ndarray::{concatenate, s, Array2, Array3, Axis};

use super::PromptLayer;
use crate::error::{Error, Result};
use crate::raster::RgbImage;
use crate::Vec2;

/// Scene image with the prompt alpha-composited on top, `(H, W, 3)` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualCondition {
    pub raster: RgbImage,
}

/// History heatmap stacked on the one-hot semantic channels, stored channel-first
/// as `(1 + C, H, W)`. Channel 0 is the heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticCondition {
    pub tensor: Array3<f32>,
}

impl SemanticCondition {
    pub fn heatmap(&self) -> Array2<f32> {
        self.tensor.index_axis(Axis(0), 0).to_owned()
    }

    pub fn semantic(&self) -> Array3<f32> {
        self.tensor.slice(s![1.., .., ..]).to_owned()
    }

    pub fn channels(&self) -> usize {
        self.tensor.dim().0
    }
}

/// Blends the prompt over the scene: `(1 - a) * scene + a * prompt` with
/// `a = alpha * coverage`, so pixels outside the mask keep the scene value and
/// fully covered pixels get exactly `(1 - alpha) * scene + alpha * prompt`.
pub fn composite(scene: &RgbImage, layer: &PromptLayer, alpha: f32) -> Result<VisualCondition> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param("alpha", format!("{alpha} is outside [0, 1]")));
    }
    let (h, w, c) = scene.dim();
    if layer.raster.dim() != (h, w, c) || layer.mask.dim() != (h, w) || c != 3 {
        return Err(Error::Dimension(format!(
            "scene {:?} vs prompt {:?} / mask {:?}",
            scene.dim(),
            layer.raster.dim(),
            layer.mask.dim()
        )));
    }
    let mut raster = scene.clone();
    for ((r, col), &m) in layer.mask.indexed_iter() {
        if m <= 0.0 {
            continue;
        }
        let a = alpha * m;
        for k in 0..3 {
            let v = (1.0 - a) * scene[(r, col, k)] + a * layer.raster[(r, col, k)];
            raster[(r, col, k)] = v.clamp(0.0, 1.0);
        }
    }
    Ok(VisualCondition { raster })
}

/// Sum of isotropic gaussians (one per observed position, raster coordinates)
/// evaluated at pixel centers, normalized so the maximum is 1.
pub fn render_heatmap(traj: &[Vec2], sigma: f64, height: usize, width: usize) -> Result<Array2<f32>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param("sigma_h", format!("{sigma} must be positive")));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut acc = Array2::<f64>::zeros((height, width));
    for &p in traj {
        let gx: Vec<f64> = (0..width)
            .map(|c| {
                let d = c as f64 + 0.5 - p[0];
                (-d * d * inv).exp()
            })
            .collect();
        for r in 0..height {
            let dy = r as f64 + 0.5 - p[1];
            let gy = (-dy * dy * inv).exp();
            if gy == 0.0 {
                continue;
            }
            let mut row = acc.row_mut(r);
            for (v, g) in row.iter_mut().zip(&gx) {
                *v += gy * g;
            }
        }
    }
    Ok(normalize_max(acc))
}

pub(crate) fn normalize_max(acc: Array2<f64>) -> Array2<f32> {
    let max = acc.iter().copied().fold(0.0f64, f64::max);
    if max > 0.0 {
        acc.mapv(|v| (v / max) as f32)
    } else {
        acc.mapv(|v| v as f32)
    }
}

/// Channel concatenation `heatmap ⊕ semantic`. The semantic map must already be at
/// the heatmap's resolution (see [`crate::raster::SemanticMap::resized`]).
pub fn build_semantic_condition(
    heatmap: &Array2<f32>,
    semantic_one_hot: &Array3<f32>,
) -> Result<SemanticCondition> {
    let (_, sh, sw) = semantic_one_hot.dim();
    if heatmap.dim() != (sh, sw) {
        return Err(Error::Dimension(format!(
            "heatmap {:?} vs semantic map {}x{}",
            heatmap.dim(),
            sh,
            sw
        )));
    }
    let tensor = concatenate(
        Axis(0),
        &[heatmap.view().insert_axis(Axis(0)), semantic_one_hot.view()],
    )
    .expect("spatial shapes checked");
    Ok(SemanticCondition { tensor })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{draw_prompt, VisualPromptStyle};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scene(h: usize, w: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, 3), |_| rng.random::<f32>())
    }

    fn layer(h: usize, w: usize) -> PromptLayer {
        draw_prompt(
            &[[4.0, 4.0], [20.0, 12.0], [28.0, 28.0]],
            &VisualPromptStyle::default(),
            h,
            w,
        )
        .unwrap()
    }

    #[test]
    fn alpha_zero_is_identity() {
        let scene = random_scene(32, 32, 1);
        let out = composite(&scene, &layer(32, 32), 0.0).unwrap();
        assert_eq!(out.raster, scene);
    }

    #[test]
    fn alpha_one_replaces_covered_pixels() {
        let scene = random_scene(32, 32, 2);
        let l = layer(32, 32);
        let out = composite(&scene, &l, 1.0).unwrap();
        for ((r, c), &m) in l.mask.indexed_iter() {
            for k in 0..3 {
                if m == 1.0 {
                    assert_eq!(out.raster[(r, c, k)], l.raster[(r, c, k)]);
                } else if m == 0.0 {
                    assert_eq!(out.raster[(r, c, k)], scene[(r, c, k)]);
                }
            }
        }
    }

    #[test]
    fn half_alpha_blend_value() {
        let scene = Array3::from_elem((8, 8, 3), 0.2f32);
        let mut l = PromptLayer {
            raster: Array3::zeros((8, 8, 3)),
            mask: Array2::zeros((8, 8)),
        };
        l.mask[(3, 3)] = 1.0;
        l.raster[(3, 3, 0)] = 1.0;
        let out = composite(&scene, &l, 0.5).unwrap();
        assert!((out.raster[(3, 3, 0)] - 0.6).abs() < 1e-7);
        assert!((out.raster[(3, 3, 1)] - 0.1).abs() < 1e-7);
        assert_eq!(out.raster[(0, 0, 0)], 0.2);
    }

    #[test]
    fn composite_shape_mismatch() {
        let scene = random_scene(16, 16, 3);
        assert!(matches!(
            composite(&scene, &layer(32, 32), 0.5),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn heatmap_single_point_is_symmetric() {
        let hm = render_heatmap(&[[16.5, 16.5]], 3.0, 33, 33).unwrap();
        assert_eq!(hm[(16, 16)], 1.0);
        for d in 1..10 {
            let v = hm[(16, 16 + d)];
            assert_eq!(v, hm[(16, 16 - d)]);
            assert_eq!(v, hm[(16 + d, 16)]);
            assert_eq!(v, hm[(16 - d, 16)]);
            assert!(v < hm[(16, 16 + d - 1)]);
        }
    }

    #[test]
    fn heatmap_two_far_points() {
        let hm = render_heatmap(&[[5.5, 5.5], [50.5, 40.5]], 2.0, 48, 64).unwrap();
        assert!((hm[(5, 5)] - 1.0).abs() < 1e-6);
        assert!((hm[(40, 50)] - 1.0).abs() < 1e-6);
        assert!(hm[(20, 25)] < 1e-6);
    }

    #[test]
    fn heatmap_matches_dense_oracle() {
        let traj: Vec<Vec2> = (0..8).map(|i| [3.2 + 2.1 * i as f64, 20.0 - 1.3 * i as f64]).collect();
        let (h, w, sigma) = (32, 40, 4.0);
        let got = render_heatmap(&traj, sigma, h, w).unwrap();
        let mut dense = vec![0.0f64; h * w];
        for r in 0..h {
            for c in 0..w {
                for p in &traj {
                    let dx = c as f64 + 0.5 - p[0];
                    let dy = r as f64 + 0.5 - p[1];
                    dense[r * w + c] += (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        let max = dense.iter().cloned().fold(0.0, f64::max);
        for r in 0..h {
            for c in 0..w {
                assert!((got[(r, c)] as f64 - dense[r * w + c] / max).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn heatmap_out_of_bounds_tail() {
        let hm = render_heatmap(&[[-3.0, 5.0]], 2.0, 10, 10).unwrap();
        assert_eq!(hm[(4, 0)], 1.0);
        assert!(hm.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(render_heatmap(&[[0.0, 0.0]], 0.0, 4, 4).is_err());
    }

    #[test]
    fn semantic_condition_channels() {
        let hm = render_heatmap(&[[4.0, 4.0]], 2.0, 8, 8).unwrap();
        let sem = crate::raster::SemanticMap::new(Array2::from_elem((8, 8), 1u8), 3)
            .unwrap()
            .one_hot();
        let cond = build_semantic_condition(&hm, &sem).unwrap();
        assert_eq!(cond.channels(), 4);
        assert_eq!(cond.heatmap(), hm);
        assert!(matches!(
            build_semantic_condition(&Array2::zeros((4, 4)), &sem),
            Err(Error::Dimension(_))
        ));
    }

    proptest! {
        #[test]
        fn concatenate_then_split_is_lossless(
            h in 1usize..12, w in 1usize..12, c in 1usize..5, seed in 0u64..1000
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hm = Array2::from_shape_fn((h, w), |_| rng.random::<f32>());
            let sem = Array3::from_shape_fn((c, h, w), |_| rng.random::<f32>());
            let cond = build_semantic_condition(&hm, &sem).unwrap();
            prop_assert_eq!(cond.heatmap(), hm);
            prop_assert_eq!(cond.semantic(), sem);
        }
    }
}
