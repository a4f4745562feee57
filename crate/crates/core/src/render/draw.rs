use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptColor {
    Red,
    Green,
    Blue,
}

impl PromptColor {
    pub const ALL: [PromptColor; 3] = [PromptColor::Red, PromptColor::Green, PromptColor::Blue];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            PromptColor::Red => [1.0, 0.0, 0.0],
            PromptColor::Green => [0.0, 1.0, 0.0],
            PromptColor::Blue => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptShape {
    Arrow,
    Points,
}

impl PromptShape {
    pub const ALL: [PromptShape; 2] = [PromptShape::Arrow, PromptShape::Points];
}

/// How the arrow body connects the observed points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrowPath {
    /// Through every observed point.
    #[default]
    Polyline,
    /// Straight from the first to the last point.
    SingleSegment,
}

/// Appearance of the drawn prompt. Sizes are in pixels of the canvas being drawn on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisualPromptStyle {
    pub color: PromptColor,
    pub shape: PromptShape,
    pub alpha: f32,
    pub line_width: f32,
    pub arrowhead_size: f32,
    pub point_radius: f32,
    #[serde(default)]
    pub arrow_path: ArrowPath,
}

impl Default for VisualPromptStyle {
    fn default() -> Self {
        Self {
            color: PromptColor::Red,
            shape: PromptShape::Arrow,
            alpha: 0.8,
            line_width: 3.0,
            arrowhead_size: 9.0,
            point_radius: 3.0,
            arrow_path: ArrowPath::Polyline,
        }
    }
}

impl VisualPromptStyle {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::param("alpha", format!("{} is outside [0, 1]", self.alpha)));
        }
        for (name, v) in [
            ("line_width", self.line_width),
            ("arrowhead_size", self.arrowhead_size),
            ("point_radius", self.point_radius),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::param(name, format!("{v} must be positive")));
            }
        }
        Ok(())
    }

    /// Same style with lengths multiplied by `factor` (for drawing at another resolution).
    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            line_width: self.line_width * factor,
            arrowhead_size: self.arrowhead_size * factor,
            point_radius: self.point_radius * factor,
            ..*self
        }
    }

    pub fn label(&self) -> String {
        let c = match self.color {
            PromptColor::Red => "red",
            PromptColor::Green => "green",
            PromptColor::Blue => "blue",
        };
        let s = match self.shape {
            PromptShape::Arrow => "arrow",
            PromptShape::Points => "points",
        };
        format!("{c} {s}")
    }
}

/// The drawn prompt: its color raster and anti-aliased coverage mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptLayer {
    /// `(H, W, 3)`; prompt color where the mask is nonzero, zero elsewhere.
    pub raster: Array3<f32>,
    /// `(H, W)` coverage in `[0, 1]`.
    pub mask: Array2<f32>,
}

/// Rasterizes the observed trajectory (pixel coordinates) as an arrow or a set of dots.
pub fn draw_prompt(
    traj_pixels: &[Vec2],
    style: &VisualPromptStyle,
    height: usize,
    width: usize,
) -> Result<PromptLayer> {
    style.validate()?;
    if traj_pixels.is_empty() {
        return Err(Error::Input("cannot draw an empty trajectory".into()));
    }
    let mut mask = Array2::<f32>::zeros((height, width));
    match style.shape {
        PromptShape::Points => {
            for &p in traj_pixels {
                stamp(&mut mask, disc_bbox(p, style.point_radius), |q| {
                    style.point_radius as f64 + 0.5 - dist(q, p)
                });
            }
        }
        PromptShape::Arrow => {
            let pts = distinct_points(traj_pixels);
            if pts.len() < 2 {
                return Err(Error::DegenerateHeading);
            }
            let body: Vec<Vec2> = match style.arrow_path {
                ArrowPath::Polyline => pts.clone(),
                ArrowPath::SingleSegment => vec![pts[0], *pts.last().unwrap()],
            };
            let half = style.line_width as f64 / 2.0;
            for seg in body.windows(2) {
                let (a, b) = (seg[0], seg[1]);
                let bbox = union_bbox(disc_bbox(a, half as f32), disc_bbox(b, half as f32));
                stamp(&mut mask, bbox, |q| half + 0.5 - segment_distance(q, a, b));
            }
            let tip = *body.last().unwrap();
            let prev = body[body.len() - 2];
            let dir = normalize([tip[0] - prev[0], tip[1] - prev[1]]);
            let size = style.arrowhead_size as f64;
            let base = [tip[0] - dir[0] * size, tip[1] - dir[1] * size];
            let normal = [-dir[1], dir[0]];
            let tri = [
                tip,
                [base[0] + normal[0] * size / 2.0, base[1] + normal[1] * size / 2.0],
                [base[0] - normal[0] * size / 2.0, base[1] - normal[1] * size / 2.0],
            ];
            let bbox = tri
                .iter()
                .map(|&v| disc_bbox(v, 1.0))
                .reduce(union_bbox)
                .unwrap();
            stamp(&mut mask, bbox, |q| 0.5 - triangle_signed_distance(q, &tri));
        }
    }
    let rgb = style.color.rgb();
    let raster = Array3::from_shape_fn((height, width, 3), |(r, c, k)| {
        if mask[(r, c)] > 0.0 {
            rgb[k]
        } else {
            0.0
        }
    });
    Ok(PromptLayer { raster, mask })
}

fn distinct_points(points: &[Vec2]) -> Vec<Vec2> {
    let mut out: Vec<Vec2> = Vec::with_capacity(points.len());
    for &p in points {
        if out.last().map_or(true, |&q| dist(p, q) > 1e-9) {
            out.push(p);
        }
    }
    out
}

type BBox = (i64, i64, i64, i64); // row0, row1, col0, col1 (inclusive)

fn disc_bbox(p: Vec2, r: f32) -> BBox {
    let r = r as f64 + 1.0;
    (
        (p[1] - r).floor() as i64,
        (p[1] + r).ceil() as i64,
        (p[0] - r).floor() as i64,
        (p[0] + r).ceil() as i64,
    )
}

fn union_bbox(a: BBox, b: BBox) -> BBox {
    (a.0.min(b.0), a.1.max(b.1), a.2.min(b.2), a.3.max(b.3))
}

/// Max-accumulates `clamp(coverage(pixel_center), 0, 1)` over the clipped box.
fn stamp(mask: &mut Array2<f32>, bbox: BBox, coverage: impl Fn(Vec2) -> f64) {
    let (h, w) = mask.dim();
    let r0 = bbox.0.max(0);
    let r1 = bbox.1.min(h as i64 - 1);
    let c0 = bbox.2.max(0);
    let c1 = bbox.3.min(w as i64 - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let q = [c as f64 + 0.5, r as f64 + 0.5];
            let v = coverage(q).clamp(0.0, 1.0) as f32;
            let m = &mut mask[(r as usize, c as usize)];
            if v > *m {
                *m = v;
            }
        }
    }
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn normalize(v: Vec2) -> Vec2 {
    let n = v[0].hypot(v[1]);
    [v[0] / n, v[1] / n]
}

fn segment_distance(q: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((q[0] - a[0]) * ab[0] + (q[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(q, [a[0] + ab[0] * t, a[1] + ab[1] * t])
}

/// Negative inside the triangle, positive outside.
fn triangle_signed_distance(q: Vec2, tri: &[Vec2; 3]) -> f64 {
    let edge = |a: Vec2, b: Vec2| (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]);
    let s = [edge(tri[0], tri[1]), edge(tri[1], tri[2]), edge(tri[2], tri[0])];
    let inside = s.iter().all(|&v| v >= 0.0) || s.iter().all(|&v| v <= 0.0);
    let d = (0..3)
        .map(|i| segment_distance(q, tri[i], tri[(i + 1) % 3]))
        .fold(f64::INFINITY, f64::min);
    if inside {
        -d
    } else {
        d
    }
}
