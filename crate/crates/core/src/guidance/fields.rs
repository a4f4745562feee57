use std::f64::consts::PI;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::Vec2;

/// Guidance values on the goal grid, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceField {
    pub grid: Array2<f64>,
}

impl GuidanceField {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            grid: Array2::zeros((rows, cols)),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grid.dim()
    }

    /// Cells with a strictly positive value.
    pub fn support(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.grid
            .indexed_iter()
            .filter(|(_, &v)| v > 0.0)
            .map(|(idx, _)| idx)
    }
}

/// Center of cell `(row, col)` in grid coordinates.
pub fn cell_center(row: usize, col: usize) -> Vec2 {
    [col as f64 + 0.5, row as f64 + 0.5]
}

/// Angle of a grid-space vector, counterclockwise as seen on screen (rows grow downward).
pub fn screen_angle(v: Vec2) -> f64 {
    (-v[1]).atan2(v[0])
}

/// Wraps an angle to `[-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a - 2.0 * PI * (a / (2.0 * PI)).round();
    if w < -PI {
        w + 2.0 * PI
    } else if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Heading vector from the last two observed positions.
pub fn heading(previous: Vec2, current: Vec2) -> Result<Vec2> {
    let v = [current[0] - previous[0], current[1] - previous[1]];
    if v[0] == 0.0 && v[1] == 0.0 {
        return Err(Error::DegenerateHeading);
    }
    Ok(v)
}

/// `max(0, 1 - |theta - theta_p| / theta_max)` where `theta_p` is the angle from the
/// current position to each cell center, relative to the heading. The cell holding
/// the current position is 0.
pub fn direction_field(
    current: Vec2,
    heading: Vec2,
    theta: f64,
    theta_max: f64,
    rows: usize,
    cols: usize,
) -> Result<GuidanceField> {
    if heading[0] == 0.0 && heading[1] == 0.0 {
        return Err(Error::DegenerateHeading);
    }
    if !(theta_max > 0.0) || !theta_max.is_finite() {
        return Err(Error::param("theta_max", "must be positive"));
    }
    if !theta.is_finite() {
        return Err(Error::param("theta", "must be finite"));
    }
    let heading_angle = screen_angle(heading);
    let own = (current[1].floor(), current[0].floor());
    let grid = Array2::from_shape_fn((rows, cols), |(r, c)| {
        if (r as f64, c as f64) == own {
            return 0.0;
        }
        let q = cell_center(r, c);
        let theta_p = wrap_angle(screen_angle([q[0] - current[0], q[1] - current[1]]) - heading_angle);
        (1.0 - wrap_angle(theta - theta_p).abs() / theta_max).max(0.0)
    });
    Ok(GuidanceField { grid })
}

/// `max(0, 1 - d_p / d_max)` with `d_p` the distance from each cell center to the neighbour's goal.
pub fn group_field(neighbor_goal: Vec2, d_max: f64, rows: usize, cols: usize) -> Result<GuidanceField> {
    if !(d_max > 0.0) || !d_max.is_finite() {
        return Err(Error::param("d_max", "must be positive"));
    }
    let grid = Array2::from_shape_fn((rows, cols), |(r, c)| {
        let q = cell_center(r, c);
        let d = (q[0] - neighbor_goal[0]).hypot(q[1] - neighbor_goal[1]);
        (1.0 - d / d_max).max(0.0)
    });
    Ok(GuidanceField { grid })
}

/// Gaussian bump at an explicit goal, normalized to peak 1.
pub fn explicit_goal_field(goal: Vec2, sigma: f64, rows: usize, cols: usize) -> Result<GuidanceField> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param("sigma", "must be positive"));
    }
    if !(goal[0] >= 0.0 && goal[1] >= 0.0 && goal[0] < cols as f64 && goal[1] < rows as f64) {
        return Err(Error::OutOfBounds(format!(
            "goal ({}, {}) lies outside the {rows}x{cols} goal grid",
            goal[0], goal[1]
        )));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut grid = Array2::from_shape_fn((rows, cols), |(r, c)| {
        let q = cell_center(r, c);
        let d2 = (q[0] - goal[0]).powi(2) + (q[1] - goal[1]).powi(2);
        (-d2 * inv).exp()
    });
    let max = grid.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        grid.mapv_inplace(|v| v / max);
    }
    Ok(GuidanceField { grid })
}
