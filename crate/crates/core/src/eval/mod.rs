//! Displacement metrics, benchmark evaluation and ablation sweeps.

mod ablation;
mod evaluate;
mod metrics;
mod plot;
mod steer;

pub use ablation::{
    condition_grid, prompt_style_grid, run_ablation, AblationReport, AblationSetup, CellResult, ExperimentSpec,
    SeedResult,
};
pub use evaluate::{evaluate, evaluate_checkpoints, select_windows, EvalConfig, GroupRow, MetricResult, WindowMetric};
pub use metrics::{ade, best_of_k, constant_velocity, fde, BestOfK, SelectionRule};
pub use plot::{render_prediction, save_prediction_plot};
pub use steer::{direction_sweep, group_sweep, DirectionPoint, GroupPoint, SteerCase};
