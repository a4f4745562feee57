use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::Vec2;

const DEGENERATE_W: f64 = 1e-12;

/// Projective transform from world meters to image pixels.
///
/// Pixel coordinates are `(x, y)` = (column, row) with pixel `(r, c)` covering
/// `[c, c + 1) x [r, r + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Homography {
    matrix: Matrix3<f64>,
    inverse: Matrix3<f64>,
}

impl Homography {
    pub fn new(matrix: Matrix3<f64>) -> Result<Self> {
        let det = matrix.determinant();
        let scale = matrix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !det.is_finite() || scale == 0.0 || det.abs() <= 1e-12 * scale.powi(3) {
            return Err(Error::SingularHomography(det));
        }
        let inverse = matrix.try_inverse().ok_or(Error::SingularHomography(det))?;
        Ok(Self { matrix, inverse })
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
            inverse: Matrix3::identity(),
        }
    }

    /// Axis-aligned mapping used by synthetic scenes: `x_px = ppm * x`,
    /// `y_px = height_px - ppm * y` (world y points up, image rows point down).
    pub fn metric_top_down(pixels_per_meter: f64, height_px: f64) -> Result<Self> {
        Self::from_rows([
            [pixels_per_meter, 0.0, 0.0],
            [0.0, -pixels_per_meter, height_px],
            [0.0, 0.0, 1.0],
        ])
    }

    /// Parses nine whitespace separated numbers (row major).
    pub fn parse(text: &str) -> Result<Self> {
        let values: Vec<f64> = text
            .split_whitespace()
            .enumerate()
            .map(|(i, t)| {
                t.parse::<f64>().map_err(|_| Error::Parse {
                    line: 1 + i / 3,
                    msg: format!("homography entry `{t}` is not a number"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != 9 {
            return Err(Error::Parse {
                line: 1,
                msg: format!("homography needs 9 entries, found {}", values.len()),
            });
        }
        Self::new(Matrix3::from_row_slice(&values))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let m = &self.matrix;
        (0..3)
            .map(|r| format!("{:e} {:e} {:e}\n", m[(r, 0)], m[(r, 1)], m[(r, 2)]))
            .collect()
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn world_to_pixel(&self, world: Vec2) -> Result<Vec2> {
        apply(&self.matrix, world)
    }

    pub fn pixel_to_world(&self, pixel: Vec2) -> Result<Vec2> {
        apply(&self.inverse, pixel)
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.matrix;
        [0, 1, 2].map(|r| [m[(r, 0)], m[(r, 1)], m[(r, 2)]])
    }
}

fn apply(m: &Matrix3<f64>, p: Vec2) -> Result<Vec2> {
    let v = m * Vector3::new(p[0], p[1], 1.0);
    if v.z.abs() < DEGENERATE_W || !v.z.is_finite() {
        return Err(Error::DegeneratePoint { x: p[0], y: p[1] });
    }
    Ok([v.x / v.z, v.y / v.z])
}

impl Serialize for Homography {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Homography::from_rows(rows).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_maps_points_to_themselves() {
        let h = Homography::identity();
        assert_eq!(h.world_to_pixel([3.0, 4.0]).unwrap(), [3.0, 4.0]);
    }

    #[test]
    fn pure_scale() {
        let h = Homography::from_rows([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(h.world_to_pixel([3.0, 4.0]).unwrap(), [6.0, 8.0]);
    }

    #[test]
    fn singular_matrix_rejected() {
        let err = Homography::from_rows([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(err, Err(Error::SingularHomography(_))));
    }

    #[test]
    fn point_at_infinity() {
        // Third row makes w = x - 1.
        let h = Homography::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, -1.0]]).unwrap();
        assert!(matches!(
            h.world_to_pixel([1.0, 5.0]),
            Err(Error::DegeneratePoint { .. })
        ));
    }

    #[test]
    fn text_round_trip() {
        let h = Homography::from_rows([
            [2.8128700e-02, 2.0091900e-03, -4.6693600e+00],
            [8.0625700e-04, 2.5195500e-02, -5.0608800e+00],
            [3.4555400e-04, 9.2512200e-05, 4.6255300e-01],
        ])
        .unwrap();
        let back = Homography::parse(&h.to_text()).unwrap();
        assert_eq!(back, h);
        assert!(matches!(
            Homography::parse("1 0 0 0 1 0 0 0"),
            Err(Error::Parse { .. })
        ));
    }

    fn well_conditioned() -> impl Strategy<Value = Homography> {
        (
            prop::array::uniform9(-0.3f64..0.3),
            1.0f64..20.0,
            -100.0f64..100.0,
            -100.0f64..100.0,
        )
            .prop_filter_map("singular", |(noise, s, tx, ty)| {
                let mut m = Matrix3::new(s, 0.0, tx, 0.0, s, ty, 0.0, 0.0, 1.0);
                for (i, n) in noise.iter().enumerate() {
                    let (r, c) = (i / 3, i % 3);
                    m[(r, c)] += if r == 2 { n * 1e-3 } else { *n };
                }
                Homography::new(m).ok()
            })
    }

    proptest! {
        #[test]
        fn round_trip_world_pixel_world(h in well_conditioned(), x in -20.0f64..20.0, y in -20.0f64..20.0) {
            let px = h.world_to_pixel([x, y]).unwrap();
            let back = h.pixel_to_world(px).unwrap();
            prop_assert!((back[0] - x).abs() < 1e-6 && (back[1] - y).abs() < 1e-6);
        }
    }
}
