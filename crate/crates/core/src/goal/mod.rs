//! Goal prediction: visual encoder, fusion U-Net, probability maps and sampling.

mod encoder;
mod maps;
mod model;
mod train;

pub use encoder::{EncoderBackend, EncoderConfig, VisualEncoder};
pub use maps::{
    goal_probability, make_goal_target, sample_goals, sigmoid, GoalLogitMap, GoalProbabilityMap,
    GoalSample, GridSpec, SamplingConfig, SamplingStrategy,
};
pub use model::{build_inputs, ConditionMode, GoalInputs, GoalModel, GoalModelConfig, GOAL_CHECKPOINT_FORMAT};
pub use train::{
    argmax_cells, goal_loss, train_goal_module, train_model, GoalTrainConfig, GoalTrainOutput,
};
pub use crate::nn::{EpochStats, TrainingCurve};
