//! Request and response bodies. `SCHEMA_VERSION` changes whenever these do.

use guidecot::cot::GenerationStatus;
use guidecot::guidance::GuidanceSpec;
use guidecot::Vec2;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHashes {
    pub goal: String,
    pub llm: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub schema_version: String,
    pub models_loaded: bool,
    pub checkpoints: Option<CheckpointHashes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub id: String,
    pub group: String,
    pub width: usize,
    pub height: usize,
    pub num_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub world: Vec<Vec2>,
    pub pixel: Vec<Vec2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub id: String,
    pub anchor_frame: i64,
    pub pedestrian_ids: Vec<i64>,
    pub past: Vec<Track>,
    pub future: Vec<Track>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub window_id: String,
    /// Index into the window's pedestrian list.
    pub pedestrian: usize,
    #[serde(default)]
    pub k: Option<usize>,
    /// Generated by the server when absent, and echoed back.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Return the probability map at full resolution.
    #[serde(default)]
    pub full_resolution: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidedPredictRequest {
    pub window_id: String,
    pub pedestrian: usize,
    pub guidance: GuidanceSpec,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub full_resolution: bool,
}

impl From<PredictRequest> for GuidedPredictRequest {
    fn from(r: PredictRequest) -> Self {
        Self {
            window_id: r.window_id,
            pedestrian: r.pedestrian,
            guidance: GuidanceSpec::none(),
            k: r.k,
            seed: r.seed,
            full_resolution: r.full_resolution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalOut {
    pub cell: (usize, usize),
    pub grid: Vec2,
    pub pixel: Vec2,
    pub world: Vec2,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryOut {
    pub world: Vec<Vec2>,
    pub pixel: Vec<Vec2>,
    pub cot: String,
    pub text: String,
    #[serde(flatten)]
    pub status: GenerationStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMapOut {
    pub rows: usize,
    pub cols: usize,
    /// Grid cells per transported cell along each side.
    pub factor: usize,
    /// Row-major values.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub schema_version: String,
    pub window_id: String,
    pub pedestrian: usize,
    pub pedestrian_id: i64,
    pub seed: u64,
    pub k: usize,
    pub checkpoints: CheckpointHashes,
    pub observed: Track,
    pub goals: Vec<GoalOut>,
    pub trajectories: Vec<TrajectoryOut>,
    pub probability_map: ProbabilityMapOut,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReloadRequest {
    #[serde(default)]
    pub goal_checkpoint: Option<std::path::PathBuf>,
    #[serde(default)]
    pub llm_checkpoint: Option<std::path::PathBuf>,
}
