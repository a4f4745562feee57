//! λ sweeps measuring how guidance moves goals and trajectories.

use serde::{Deserialize, Serialize};

use crate::cot::Seq2Seq;
use crate::dataset::{ObservationWindow, Scene};
use crate::error::{Error, Result};
use crate::goal::{goal_probability, sample_goals, GoalLogitMap, SamplingConfig};
use crate::guidance::{
    build_field, cell_center, heading, screen_angle, wrap_angle, GroupTarget, GuidanceKind, GuidanceSpec,
};
use crate::pipeline::{derive_seed, guidance_context, predict_from_logits, PredictConfig};

/// One pedestrian to steer, with the logits of its whole window.
pub struct SteerCase<'a> {
    pub scene: &'a Scene,
    pub window: &'a ObservationWindow,
    pub index: usize,
    pub logits: Vec<GoalLogitMap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionPoint {
    pub lambda: f64,
    /// Mean signed angle of the sampled goals from the heading.
    pub mean_offset: f64,
    /// Mean absolute angle between the sampled goals and the commanded direction.
    pub mean_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupPoint {
    pub lambda: f64,
    /// Mean distance in meters from the generated final points to the neighbour's goal.
    pub mean_distance: f64,
    pub fallback_rate: f64,
}

/// Goal samples under direction guidance `theta` for each λ. Every λ reuses the
/// same sampling seed per case. Samples in the pedestrian's own cell are skipped.
pub fn direction_sweep(
    cases: &[SteerCase],
    theta: f64,
    theta_max: f64,
    lambdas: &[f64],
    k: usize,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<Vec<DirectionPoint>> {
    if cases.is_empty() {
        return Err(Error::Input("no steering cases".into()));
    }
    let mut out = Vec::new();
    for &lambda in lambdas {
        let spec = GuidanceSpec {
            kind: GuidanceKind::Direction { theta, theta_max },
            lambda,
        };
        let (mut off, mut err, mut n) = (0.0, 0.0, 0usize);
        for (c, case) in cases.iter().enumerate() {
            let ctx = guidance_context(case.scene, case.window, case.index, &case.logits)?;
            let map = &case.logits[case.index];
            let (rows, cols) = map.grid.dim();
            let field = build_field(&spec, &ctx, rows, cols)?;
            let prob = goal_probability(map, Some(&field), lambda)?;
            let goals = sample_goals(&prob, k, sampling, derive_seed(seed, &format!("steer#{c}")), &case.scene.homography)?;
            let h = screen_angle(heading(ctx.previous, ctx.current)?);
            let own = (ctx.current[1].floor() as usize, ctx.current[0].floor() as usize);
            for g in goals.iter().filter(|g| g.cell != own) {
                let q = cell_center(g.cell.0, g.cell.1);
                let a = wrap_angle(screen_angle([q[0] - ctx.current[0], q[1] - ctx.current[1]]) - h);
                off += a;
                err += wrap_angle(theta - a).abs();
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::DegenerateDistribution("every goal sample fell in the current cell".into()));
        }
        out.push(DirectionPoint {
            lambda,
            mean_offset: off / n as f64,
            mean_error: err / n as f64,
        });
    }
    Ok(out)
}

/// Full predictions under group guidance towards each case's nearest neighbour's
/// predicted goal, for each λ. Cases with a single pedestrian are skipped.
pub fn group_sweep(
    llm: &Seq2Seq,
    cases: &[SteerCase],
    d_max: f64,
    lambdas: &[f64],
    cfg: &PredictConfig,
    seed: u64,
) -> Result<Vec<GroupPoint>> {
    let mut out = Vec::new();
    for &lambda in lambdas {
        let (mut dist, mut n, mut fallbacks, mut total) = (0.0, 0usize, 0usize, 0usize);
        for (c, case) in cases.iter().enumerate() {
            let w = case.window;
            let i = case.index;
            let Some(j) = crate::cot::listed_neighbors(w, i, Some(1)).first().copied() else {
                continue;
            };
            let spec = GuidanceSpec {
                kind: GuidanceKind::Group {
                    neighbor_id: w.pedestrian_ids[j],
                    d_max,
                    target: GroupTarget::PredictedGoal,
                },
                lambda,
            };
            let ctx = guidance_context(case.scene, w, i, &case.logits)?;
            let goal_grid = ctx.neighbor_goals[&w.pedestrian_ids[j]];
            let goal_world = case.logits[j].spec.grid_to_world(&case.scene.homography, goal_grid)?;
            let pred = predict_from_logits(
                llm,
                case.scene,
                w,
                i,
                &case.logits,
                Some(&spec),
                cfg,
                derive_seed(seed, &format!("group#{c}")),
            )?;
            for t in &pred.trajectories {
                let last = t.world[t.world.len() - 1];
                dist += (last[0] - goal_world[0]).hypot(last[1] - goal_world[1]);
                n += 1;
            }
            fallbacks += pred.fallback_count();
            total += pred.trajectories.len();
        }
        if n == 0 {
            return Err(Error::Input("no steering case has a neighbour".into()));
        }
        out.push(GroupPoint {
            lambda,
            mean_distance: dist / n as f64,
            fallback_rate: fallbacks as f64 / total as f64,
        });
    }
    Ok(out)
}
