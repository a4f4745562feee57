//! User guidance fields added to the goal logits.
//!
//! All geometry here is in goal-grid coordinates: `(x, y)` = (column, row), one
//! unit per grid cell, cell `(r, c)` centered at `(c + 0.5, r + 0.5)`. Angles are
//! measured counterclockwise as seen on screen.

mod fields;

use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

pub use fields::{
    cell_center, direction_field, explicit_goal_field, group_field, heading, screen_angle,
    wrap_angle, GuidanceField,
};

use crate::error::{Error, Result};
use crate::Vec2;

pub const DEFAULT_THETA_MAX: f64 = std::f64::consts::FRAC_PI_3;
/// Default group radius, in cells of a 128-cell grid.
pub const DEFAULT_D_MAX: f64 = 20.0;
pub const DEFAULT_GOAL_SIGMA: f64 = 4.0;
pub const LAMBDA_RANGE: (f64, f64) = (0.0, 10.0);

/// Which neighbour position group guidance gathers around.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupTarget {
    /// The neighbour's predicted (argmax) goal.
    #[default]
    PredictedGoal,
    /// The neighbour's ground-truth final position.
    GroundTruthFuture,
}

/// The steering request, serialized identically by the HTTP API and the UI.
///
/// ```json
/// {"kind": "direction", "theta": 1.5707963, "theta_max": 1.0471976, "lambda": 4.0}
/// {"kind": "group", "neighbor_id": 7, "d_max": 20.0, "target": "predicted_goal", "lambda": 2.0}
/// {"kind": "explicit_goal", "goal_point": [57.0, 95.0], "sigma": 4.0, "lambda": 8.0}
/// {"kind": "none", "lambda": 0.0}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    #[serde(flatten)]
    pub kind: GuidanceKind,
    #[serde(default)]
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GuidanceKind {
    None,
    Direction {
        /// Target angle relative to the current heading.
        theta: f64,
        #[serde(default = "default_theta_max")]
        theta_max: f64,
    },
    Group {
        neighbor_id: i64,
        #[serde(default = "default_d_max")]
        d_max: f64,
        #[serde(default)]
        target: GroupTarget,
    },
    ExplicitGoal {
        goal_point: Vec2,
        #[serde(default = "default_goal_sigma")]
        sigma: f64,
    },
}

fn default_theta_max() -> f64 {
    DEFAULT_THETA_MAX
}

fn default_d_max() -> f64 {
    DEFAULT_D_MAX
}

fn default_goal_sigma() -> f64 {
    DEFAULT_GOAL_SIGMA
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionPreset {
    Stop,
    Left,
    Right,
}

impl GuidanceSpec {
    pub fn none() -> Self {
        Self {
            kind: GuidanceKind::None,
            lambda: 0.0,
        }
    }

    pub fn direction(theta: f64, lambda: f64) -> Self {
        Self {
            kind: GuidanceKind::Direction {
                theta,
                theta_max: DEFAULT_THETA_MAX,
            },
            lambda,
        }
    }

    pub fn group(neighbor_id: i64, d_max: f64, lambda: f64) -> Self {
        Self {
            kind: GuidanceKind::Group {
                neighbor_id,
                d_max,
                target: GroupTarget::PredictedGoal,
            },
            lambda,
        }
    }

    pub fn explicit_goal(goal_point: Vec2, sigma: f64, lambda: f64) -> Self {
        Self {
            kind: GuidanceKind::ExplicitGoal { goal_point, sigma },
            lambda,
        }
    }

    /// Left and right turn by a quarter circle; stop pins the goal at the current position.
    pub fn preset(preset: DirectionPreset, current: Vec2, lambda: f64) -> Self {
        match preset {
            DirectionPreset::Left => Self::direction(FRAC_PI_2, lambda),
            DirectionPreset::Right => Self::direction(-FRAC_PI_2, lambda),
            DirectionPreset::Stop => Self::explicit_goal(current, DEFAULT_GOAL_SIGMA, lambda),
        }
    }

    pub fn is_neutral(&self) -> bool {
        matches!(self.kind, GuidanceKind::None) || self.lambda == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::param("lambda", format!("{} must be a finite value >= 0", self.lambda)));
        }
        match self.kind {
            GuidanceKind::None => {}
            GuidanceKind::Direction { theta, theta_max } => {
                if !theta.is_finite() {
                    return Err(Error::param("theta", "must be finite"));
                }
                if !(theta_max > 0.0) || !theta_max.is_finite() {
                    return Err(Error::param("theta_max", "must be positive"));
                }
            }
            GuidanceKind::Group { d_max, .. } => {
                if !(d_max > 0.0) || !d_max.is_finite() {
                    return Err(Error::param("d_max", "must be positive"));
                }
            }
            GuidanceKind::ExplicitGoal { goal_point, sigma } => {
                if !goal_point.iter().all(|v| v.is_finite()) {
                    return Err(Error::param("goal_point", "must be finite"));
                }
                if !(sigma > 0.0) || !sigma.is_finite() {
                    return Err(Error::param("sigma", "must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// What a guidance field needs to know about the pedestrian and its neighbours,
/// all in goal-grid coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GuidanceContext {
    pub previous: Vec2,
    pub current: Vec2,
    /// Predicted goals of the other pedestrians in the window, by pedestrian id.
    pub neighbor_goals: HashMap<i64, Vec2>,
    /// Ground-truth final positions of the other pedestrians, by pedestrian id.
    pub neighbor_futures: HashMap<i64, Vec2>,
}

/// Dispatches a spec to its field. `none` yields the zero field.
pub fn build_field(
    spec: &GuidanceSpec,
    ctx: &GuidanceContext,
    rows: usize,
    cols: usize,
) -> Result<GuidanceField> {
    spec.validate()?;
    match spec.kind {
        GuidanceKind::None => Ok(GuidanceField::zeros(rows, cols)),
        GuidanceKind::Direction { theta, theta_max } => {
            let h = heading(ctx.previous, ctx.current)?;
            direction_field(ctx.current, h, theta, theta_max, rows, cols)
        }
        GuidanceKind::Group {
            neighbor_id,
            d_max,
            target,
        } => {
            let table = match target {
                GroupTarget::PredictedGoal => &ctx.neighbor_goals,
                GroupTarget::GroundTruthFuture => &ctx.neighbor_futures,
            };
            let goal = table.get(&neighbor_id).ok_or_else(|| {
                Error::Reference(format!("pedestrian {neighbor_id} is not a neighbour in this window"))
            })?;
            group_field(*goal, d_max, rows, cols)
        }
        GuidanceKind::ExplicitGoal { goal_point, sigma } => {
            explicit_goal_field(goal_point, sigma, rows, cols)
        }
    }
}
