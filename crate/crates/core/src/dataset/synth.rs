//! Seeded synthetic scenes with known goals, for desk-scale training and tests.
//!
//! Walkers follow piecewise-linear paths through traversable space and stop at
//! painted destination markers. The markers appear only in the color image; the
//! semantic map labels them as ordinary floor.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Homography, RawAnnotation, Scene, SceneGroup};
use crate::error::{Error, Result};
use crate::raster::{SemanticClasses, SemanticMap};
use crate::Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    /// Horizontal corridor with a branch to the top edge (a T junction).
    Corridor,
    /// Open square with round pillars.
    Plaza,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub kind: LayoutKind,
    pub width_px: usize,
    pub height_px: usize,
    pub pixels_per_meter: f64,
    pub num_pedestrians: usize,
    /// Corridor only.
    pub corridor_width_m: f64,
    /// Plaza only.
    pub num_obstacles: usize,
    pub obstacle_radius_m: f64,
    /// Plaza only; the corridor always has one marker per corridor end.
    pub num_destinations: usize,
    pub marker_size_m: f64,
    pub speed_mps: [f64; 2],
    pub frame_interval_s: f64,
    /// Frames recorded per pedestrian (walking plus waiting at the destination).
    pub track_frames: usize,
    /// Scene duration in strides; start times are spread over it.
    pub num_frames: usize,
    pub frame_stride: i64,
}

impl SceneLayout {
    pub fn plaza() -> Self {
        Self {
            kind: LayoutKind::Plaza,
            width_px: 64,
            height_px: 64,
            pixels_per_meter: 4.0,
            num_pedestrians: 40,
            corridor_width_m: 4.0,
            num_obstacles: 3,
            obstacle_radius_m: 0.8,
            num_destinations: 4,
            marker_size_m: 1.5,
            speed_mps: [1.0, 1.4],
            frame_interval_s: 0.4,
            track_frames: 32,
            num_frames: 240,
            frame_stride: 1,
        }
    }

    pub fn corridor() -> Self {
        Self {
            kind: LayoutKind::Corridor,
            ..Self::plaza()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::Generation("scene dimensions must be positive".into()));
        }
        let positive = [
            ("pixels_per_meter", self.pixels_per_meter),
            ("frame_interval_s", self.frame_interval_s),
            ("speed_mps", self.speed_mps[0]),
            ("marker_size_m", self.marker_size_m),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Generation(format!("{name} must be positive")));
        }
        if self.speed_mps[1] < self.speed_mps[0] {
            return Err(Error::Generation("speed range is empty".into()));
        }
        if self.track_frames < 2 || self.num_frames < self.track_frames || self.frame_stride < 1 {
            return Err(Error::Generation(
                "need track_frames >= 2, num_frames >= track_frames and a positive stride".into(),
            ));
        }
        Ok(())
    }

    fn width_m(&self) -> f64 {
        self.width_px as f64 / self.pixels_per_meter
    }

    fn height_m(&self) -> f64 {
        self.height_px as f64 / self.pixels_per_meter
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthGoal {
    pub pedestrian_id: i64,
    pub world: Vec2,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub scene: Scene,
    pub annotations: Vec<RawAnnotation>,
    pub goals: Vec<SynthGoal>,
    /// Marker centers in world meters.
    pub destinations: Vec<Vec2>,
}

/// Static geometry in world meters (y up).
struct Geometry {
    kind: LayoutKind,
    width_m: f64,
    height_m: f64,
    corridor_y: (f64, f64),
    branch_x: (f64, f64),
    pillars: Vec<(Vec2, f64)>,
    destinations: Vec<Vec2>,
}

impl Geometry {
    fn class_at(&self, p: Vec2) -> u8 {
        match self.kind {
            LayoutKind::Plaza => {
                if self.pillars.iter().any(|(c, r)| dist(*c, p) <= *r) {
                    SemanticClasses::OBSTACLE
                } else {
                    SemanticClasses::TRAVERSABLE
                }
            }
            LayoutKind::Corridor => {
                let in_main = p[1] >= self.corridor_y.0 && p[1] <= self.corridor_y.1;
                let in_branch =
                    p[0] >= self.branch_x.0 && p[0] <= self.branch_x.1 && p[1] >= self.corridor_y.0;
                if in_main || in_branch {
                    SemanticClasses::TRAVERSABLE
                } else {
                    SemanticClasses::OTHER
                }
            }
        }
    }

    /// True if a disc of radius `margin` around `p` is traversable.
    fn clear(&self, p: Vec2, margin: f64) -> bool {
        if p[0] < margin || p[1] < margin || p[0] > self.width_m - margin || p[1] > self.height_m - margin {
            return false;
        }
        match self.kind {
            LayoutKind::Plaza => self.pillars.iter().all(|(c, r)| dist(*c, p) > r + margin),
            LayoutKind::Corridor => {
                let in_main = p[1] >= self.corridor_y.0 + margin && p[1] <= self.corridor_y.1 - margin;
                let in_branch = p[0] >= self.branch_x.0 + margin
                    && p[0] <= self.branch_x.1 - margin
                    && p[1] >= self.corridor_y.0 + margin;
                in_main || in_branch
            }
        }
    }

    fn segment_clear(&self, a: Vec2, b: Vec2, margin: f64) -> bool {
        let n = (dist(a, b) / 0.05).ceil().max(1.0) as usize;
        (0..=n).all(|k| self.clear(lerp(a, b, k as f64 / n as f64), margin))
    }
}

const CLEARANCE_M: f64 = 0.5;

pub fn synth_scene(layout: &SceneLayout, seed: u64) -> Result<SynthOutput> {
    layout.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = build_geometry(layout, &mut rng)?;

    let (h, w) = (layout.height_px, layout.width_px);
    let homography = Homography::metric_top_down(layout.pixels_per_meter, h as f64)?;
    let to_world = |r: usize, c: usize| -> Vec2 {
        homography
            .pixel_to_world([c as f64 + 0.5, r as f64 + 0.5])
            .expect("axis-aligned homography is never degenerate")
    };

    let classes = Array2::from_shape_fn((h, w), |(r, c)| geom.class_at(to_world(r, c)));
    if !classes.iter().any(|&c| c == SemanticClasses::TRAVERSABLE) {
        return Err(Error::Generation("layout has no traversable area".into()));
    }
    let semantic = SemanticMap::new(classes, 3)?;

    let half_marker = layout.marker_size_m / 2.0;
    let mut image = Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            let p = to_world(r, c);
            let noise = (rng.random::<f32>() - 0.5) * 0.06;
            let mut rgb = match semantic.class_at(r, c) {
                SemanticClasses::OBSTACLE => [0.25, 0.18, 0.12],
                SemanticClasses::OTHER => [0.22, 0.42, 0.22],
                _ => [0.55, 0.55, 0.52],
            };
            if geom
                .destinations
                .iter()
                .any(|d| (d[0] - p[0]).abs() <= half_marker && (d[1] - p[1]).abs() <= half_marker)
            {
                rgb = [0.95, 0.82, 0.12];
            }
            for k in 0..3 {
                image[(r, c, k)] = (rgb[k] + noise).clamp(0.0, 1.0);
            }
        }
    }

    let scene = Scene::new(
        format!("synth-{}-{seed}", match layout.kind {
            LayoutKind::Plaza => "plaza",
            LayoutKind::Corridor => "corridor",
        }),
        SceneGroup::Eth,
        image,
        semantic,
        SemanticClasses::default(),
        homography,
        layout.frame_stride,
    )?;

    let mut annotations = Vec::new();
    let mut goals = Vec::new();
    let step_dt = layout.frame_interval_s;
    let latest_start = layout.num_frames - layout.track_frames;
    for ped in 0..layout.num_pedestrians {
        let path = sample_path(layout, &geom, &mut rng)?;
        let speed = rng.random_range(layout.speed_mps[0]..=layout.speed_mps[1]);
        let start = rng.random_range(0..=latest_start) as i64;
        let id = ped as i64 + 1;
        for k in 0..layout.track_frames {
            let pos = along_path(&path, speed * step_dt * k as f64);
            annotations.push(RawAnnotation::new(
                (start + k as i64) * layout.frame_stride,
                id,
                pos,
            ));
        }
        goals.push(SynthGoal {
            pedestrian_id: id,
            world: *path.last().expect("paths are non-empty"),
        });
    }
    annotations.sort_by_key(|a| (a.pedestrian_id, a.frame_id));

    Ok(SynthOutput {
        scene,
        annotations,
        goals,
        destinations: geom.destinations,
    })
}

fn build_geometry(layout: &SceneLayout, rng: &mut ChaCha8Rng) -> Result<Geometry> {
    let (wm, hm) = (layout.width_m(), layout.height_m());
    let mut geom = Geometry {
        kind: layout.kind,
        width_m: wm,
        height_m: hm,
        corridor_y: (0.0, 0.0),
        branch_x: (0.0, 0.0),
        pillars: Vec::new(),
        destinations: Vec::new(),
    };
    match layout.kind {
        LayoutKind::Corridor => {
            let cw = layout.corridor_width_m;
            if !(cw > 2.0 * CLEARANCE_M) || cw >= hm || cw >= wm {
                return Err(Error::Generation(format!(
                    "corridor width {cw} m leaves no traversable lane"
                )));
            }
            let cy = rng.random_range(0.3..0.45) * hm;
            let bx = rng.random_range(0.35..0.65) * wm;
            geom.corridor_y = (cy - cw / 2.0, cy + cw / 2.0);
            geom.branch_x = (bx - cw / 2.0, bx + cw / 2.0);
            let inset = layout.marker_size_m / 2.0 + 0.25;
            geom.destinations = vec![[inset, cy], [wm - inset, cy], [bx, hm - inset]];
        }
        LayoutKind::Plaza => {
            if layout.num_destinations < 2 {
                return Err(Error::Generation("plaza needs at least two destinations".into()));
            }
            for _ in 0..layout.num_obstacles {
                let c = [
                    rng.random_range(0.3..0.7) * wm,
                    rng.random_range(0.3..0.7) * hm,
                ];
                geom.pillars.push((c, layout.obstacle_radius_m));
            }
            let inset = layout.marker_size_m / 2.0 + CLEARANCE_M;
            let mut attempts = 0;
            while geom.destinations.len() < layout.num_destinations {
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::Generation("cannot place destination markers".into()));
                }
                // Markers sit near the border, spread around the perimeter.
                let t = rng.random_range(0.0..1.0);
                let along = rng.random_range(0.15..0.85);
                let d = match (t * 4.0) as usize {
                    0 => [along * wm, inset],
                    1 => [along * wm, hm - inset],
                    2 => [inset, along * hm],
                    _ => [wm - inset, along * hm],
                };
                let spaced = geom.destinations.iter().all(|o| dist(*o, d) > 0.3 * wm.min(hm));
                if spaced && geom.clear(d, CLEARANCE_M) {
                    geom.destinations.push(d);
                }
            }
        }
    }
    Ok(geom)
}

/// Waypoints `[start, turn point(s)..., destination]`.
fn sample_path(layout: &SceneLayout, geom: &Geometry, rng: &mut ChaCha8Rng) -> Result<Vec<Vec2>> {
    for _ in 0..10_000 {
        let path = match layout.kind {
            LayoutKind::Plaza => {
                let start = [
                    rng.random_range(0.0..geom.width_m),
                    rng.random_range(0.0..geom.height_m),
                ];
                let heading = rng.random_range(0.0..std::f64::consts::TAU);
                let leg = rng.random_range(2.5..5.0);
                let turn = [start[0] + leg * heading.cos(), start[1] + leg * heading.sin()];
                // After the turn point, walkers head for the nearest marker.
                let dest = *geom
                    .destinations
                    .iter()
                    .min_by(|a, b| dist(**a, turn).total_cmp(&dist(**b, turn)))
                    .expect("plaza has destinations");
                if dist(turn, dest) < 2.5 {
                    continue;
                }
                vec![start, turn, dest]
            }
            LayoutKind::Corridor => {
                let (y0, y1) = geom.corridor_y;
                let (x0, x1) = geom.branch_x;
                let lane = (y1 - y0) / 2.0 - CLEARANCE_M;
                let cy = (y0 + y1) / 2.0;
                let cx = (x0 + x1) / 2.0;
                let from = rng.random_range(0..3usize);
                let mut to = rng.random_range(0..2usize);
                if to >= from {
                    to += 1;
                }
                let offset = rng.random_range(-lane..=lane);
                let end = |k: usize| -> Vec2 {
                    let d = geom.destinations[k];
                    match k {
                        0 | 1 => [d[0], cy + offset],
                        _ => [cx + offset, d[1]],
                    }
                };
                let start = end(from);
                let dest = geom.destinations[to];
                let junction = [cx + offset, cy + offset];
                if from == 2 || to == 2 {
                    vec![start, junction, dest]
                } else {
                    vec![start, [dest[0], cy + offset], dest]
                }
            }
        };
        if path.windows(2).all(|s| geom.segment_clear(s[0], s[1], CLEARANCE_M * 0.5)) {
            return Ok(path);
        }
    }
    Err(Error::Generation("could not route a pedestrian through the layout".into()))
}

fn along_path(path: &[Vec2], mut s: f64) -> Vec2 {
    for seg in path.windows(2) {
        let len = dist(seg[0], seg[1]);
        if s <= len {
            return if len > 0.0 { lerp(seg[0], seg[1], s / len) } else { seg[0] };
        }
        s -= len;
    }
    *path.last().expect("non-empty path")
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn lerp(a: Vec2, b: Vec2, t: f64) -> Vec2 {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_windows, WindowConfig};
    use std::collections::BTreeMap;

    #[test]
    fn deterministic_for_seed() {
        for layout in [SceneLayout::plaza(), SceneLayout::corridor()] {
            let a = synth_scene(&layout, 7).unwrap();
            let b = synth_scene(&layout, 7).unwrap();
            assert_eq!(a.annotations, b.annotations);
            assert_eq!(a.goals, b.goals);
            assert_eq!(a.scene.image, b.scene.image);
            assert_eq!(a.scene.semantic, b.scene.semantic);
            let c = synth_scene(&layout, 8).unwrap();
            assert_ne!(a.annotations, c.annotations);
        }
    }

    #[test]
    fn positions_lie_on_traversable_pixels() {
        for layout in [SceneLayout::corridor(), SceneLayout::plaza()] {
            let out = synth_scene(&layout, 3).unwrap();
            for a in &out.annotations {
                let px = out.scene.homography.world_to_pixel(a.position).unwrap();
                assert!(out.scene.contains_pixel(px), "{px:?}");
                let class = out.scene.semantic.class_at(px[1] as usize, px[0] as usize);
                assert_eq!(class, SemanticClasses::TRAVERSABLE, "{:?}", a);
            }
        }
    }

    #[test]
    fn every_track_forms_windows_without_gaps() {
        let layout = SceneLayout {
            num_pedestrians: 20,
            ..SceneLayout::corridor()
        };
        let out = synth_scene(&layout, 11).unwrap();
        let cfg = WindowConfig::default();
        let windows = build_windows("s", &out.annotations, &cfg, layout.frame_stride).unwrap();
        let mut anchors_per_ped: BTreeMap<i64, usize> = BTreeMap::new();
        for w in &windows {
            for &p in &w.pedestrian_ids {
                *anchors_per_ped.entry(p).or_default() += 1;
            }
        }
        assert_eq!(anchors_per_ped.len(), 20);
        let expected = layout.track_frames - cfg.span() + 1;
        assert!(anchors_per_ped.values().all(|&n| n == expected));
    }

    #[test]
    fn zero_traversable_area_fails() {
        let layout = SceneLayout {
            corridor_width_m: 0.0,
            ..SceneLayout::corridor()
        };
        assert!(matches!(synth_scene(&layout, 1), Err(Error::Generation(_))));
        let layout = SceneLayout {
            width_px: 0,
            ..SceneLayout::plaza()
        };
        assert!(matches!(synth_scene(&layout, 1), Err(Error::Generation(_))));
    }

    #[test]
    fn walkers_end_at_markers() {
        let out = synth_scene(&SceneLayout::plaza(), 5).unwrap();
        for g in &out.goals {
            assert!(out.destinations.contains(&g.world));
        }
    }
}
