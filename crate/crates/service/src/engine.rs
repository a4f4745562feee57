use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use candle_core::Device;
use dashmap::DashMap;
use guidecot::cot::Seq2Seq;
use guidecot::dataset::{Dataset, ObservationWindow, Scene};
use guidecot::goal::{GoalLogitMap, GoalModel, SamplingConfig};
use guidecot::pipeline::{predict_from_logits, window_logits, PredictConfig};
use guidecot::raster::encode_rgb_png;
use guidecot::Vec2;
use tokio::sync::RwLock;

use crate::api::*;
use crate::config::ServiceConfig;
use crate::error::ServiceError;
use crate::runs::{RunLog, RunRecord};

/// Both checkpoints, immutable once loaded.
pub struct Models {
    pub goal: GoalModel,
    pub llm: Seq2Seq,
    pub hashes: CheckpointHashes,
}

impl Models {
    pub fn new(goal: GoalModel, llm: Seq2Seq) -> Result<Self, ServiceError> {
        let hashes = CheckpointHashes {
            goal: goal.hash()?,
            llm: llm.hash()?,
        };
        Ok(Self { goal, llm, hashes })
    }

    pub fn load(goal: &Path, llm: &Path) -> Result<Self, ServiceError> {
        let dev = Device::Cpu;
        Self::new(GoalModel::load(goal, &dev)?, Seq2Seq::load(llm, &dev)?)
    }
}

type LogitKey = (String, usize);

/// Shared service state: dataset, models and caches.
pub struct Engine {
    pub config: ServiceConfig,
    dataset: Arc<Dataset>,
    window_index: HashMap<String, usize>,
    models: Arc<RwLock<Option<Arc<Models>>>>,
    /// Unguided goal logits by (window, pedestrian index). Entries are never overwritten.
    logits: DashMap<LogitKey, Arc<GoalLogitMap>>,
    images: DashMap<String, Arc<Vec<u8>>>,
    runs: Option<RunLog>,
}

fn track(scene: &Scene, world: &[Vec2]) -> Result<Track, ServiceError> {
    let pixel = world
        .iter()
        .map(|&p| scene.homography.world_to_pixel(p))
        .collect::<guidecot::Result<_>>()?;
    Ok(Track {
        world: world.to_vec(),
        pixel,
    })
}

impl Engine {
    pub fn new(config: ServiceConfig, dataset: Dataset, models: Option<Models>) -> Result<Self, ServiceError> {
        config.validate()?;
        let runs = config.run_dir.as_deref().map(RunLog::open).transpose()?;
        let window_index = dataset.windows.iter().enumerate().map(|(i, w)| (w.id(), i)).collect();
        Ok(Self {
            config,
            dataset: Arc::new(dataset),
            window_index,
            models: Arc::new(RwLock::new(models.map(Arc::new))),
            logits: DashMap::new(),
            images: DashMap::new(),
            runs,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn run_log(&self) -> Option<&RunLog> {
        self.runs.as_ref()
    }

    pub fn cached_logit_entries(&self) -> usize {
        self.logits.len()
    }

    pub async fn health(&self) -> Health {
        let m = self.models.read().await;
        Health {
            status: "ok".into(),
            schema_version: SCHEMA_VERSION.into(),
            models_loaded: m.is_some(),
            checkpoints: m.as_ref().map(|m| m.hashes.clone()),
        }
    }

    pub fn scenes(&self) -> Vec<SceneSummary> {
        self.dataset
            .scenes
            .iter()
            .map(|s| SceneSummary {
                id: s.id.clone(),
                group: s.group.to_string(),
                width: s.width(),
                height: s.height(),
                num_windows: self.dataset.windows.iter().filter(|w| w.scene_id == s.id).count(),
            })
            .collect()
    }

    fn scene(&self, id: &str) -> Result<&Arc<Scene>, ServiceError> {
        self.dataset
            .scene(id)
            .ok_or_else(|| ServiceError::NotFound(format!("unknown scene `{id}`")))
    }

    pub fn scene_png(&self, id: &str) -> Result<Arc<Vec<u8>>, ServiceError> {
        if let Some(b) = self.images.get(id) {
            return Ok(Arc::clone(&b));
        }
        let png = Arc::new(encode_rgb_png(&self.scene(id)?.image)?);
        Ok(Arc::clone(&self.images.entry(id.to_string()).or_insert(png)))
    }

    pub fn windows(&self, scene_id: &str) -> Result<Vec<WindowSummary>, ServiceError> {
        let scene = self.scene(scene_id)?;
        self.dataset
            .windows
            .iter()
            .filter(|w| w.scene_id == scene_id)
            .map(|w| {
                Ok(WindowSummary {
                    id: w.id(),
                    anchor_frame: w.anchor_frame,
                    pedestrian_ids: w.pedestrian_ids.clone(),
                    past: w.past.iter().map(|t| track(scene, t)).collect::<Result<_, _>>()?,
                    future: w.future.iter().map(|t| track(scene, t)).collect::<Result<_, _>>()?,
                })
            })
            .collect()
    }

    fn window(&self, id: &str) -> Result<&ObservationWindow, ServiceError> {
        self.window_index
            .get(id)
            .map(|&i| &self.dataset.windows[i])
            .ok_or_else(|| ServiceError::NotFound(format!("unknown window `{id}`")))
    }

    /// Cached unguided logits for every pedestrian of the window; the visual
    /// encoder only runs on a miss.
    fn window_logits(&self, models: &Models, scene: &Scene, w: &ObservationWindow) -> Result<Vec<GoalLogitMap>, ServiceError> {
        let id = w.id();
        let n = w.num_pedestrians();
        let hit: Option<Vec<GoalLogitMap>> = (0..n)
            .map(|i| self.logits.get(&(id.clone(), i)).map(|m| (**m).clone()))
            .collect();
        if let Some(v) = hit {
            return Ok(v);
        }
        let fresh = window_logits(&models.goal, scene, w)?;
        Ok(fresh
            .into_iter()
            .enumerate()
            .map(|(i, m)| (**self.logits.entry((id.clone(), i)).or_insert_with(|| Arc::new(m))).clone())
            .collect())
    }

    /// Synchronous prediction against `models`. The request must carry a seed.
    pub fn compute(&self, models: &Models, req: &GuidedPredictRequest) -> Result<PredictResponse, ServiceError> {
        let seed = req
            .seed
            .ok_or_else(|| ServiceError::Validation {
                field: "seed".into(),
                msg: "missing".into(),
            })?;
        let k = req.k.unwrap_or(self.config.default_k);
        if k == 0 || k > self.config.max_k {
            return Err(ServiceError::Validation {
                field: "k".into(),
                msg: format!("{k} is outside 1..={}", self.config.max_k),
            });
        }
        req.guidance.validate()?;
        let w = self.window(&req.window_id)?;
        if req.pedestrian >= w.num_pedestrians() {
            return Err(ServiceError::Validation {
                field: "pedestrian".into(),
                msg: format!("index {} but the window has {} pedestrians", req.pedestrian, w.num_pedestrians()),
            });
        }
        let scene = self.scene(&w.scene_id)?;
        let logits = self.window_logits(models, scene, w)?;
        let cfg = PredictConfig {
            k,
            sampling: SamplingConfig::default(),
            decode: models.llm.config().decode.clone(),
        };
        let pred = predict_from_logits(
            &models.llm,
            scene,
            w,
            req.pedestrian,
            &logits,
            Some(&req.guidance),
            &cfg,
            seed,
        )?;
        let prob = pred.probability.as_ref().expect("prediction carries its map");
        let side = if req.full_resolution { usize::MAX } else { self.config.map_side };
        let grid = prob.downsampled(side);
        let (rows, cols) = grid.dim();
        let trajectories = pred
            .trajectories
            .iter()
            .zip(&pred.cots)
            .map(|(t, cot)| {
                let tr = track(scene, &t.world)?;
                Ok(TrajectoryOut {
                    world: tr.world,
                    pixel: tr.pixel,
                    cot: cot.clone(),
                    text: t.text.clone(),
                    status: t.status.clone(),
                })
            })
            .collect::<Result<_, ServiceError>>()?;
        Ok(PredictResponse {
            schema_version: SCHEMA_VERSION.into(),
            window_id: req.window_id.clone(),
            pedestrian: req.pedestrian,
            pedestrian_id: pred.pedestrian_id,
            seed,
            k,
            checkpoints: models.hashes.clone(),
            observed: track(scene, &w.past[req.pedestrian])?,
            goals: pred
                .goals
                .iter()
                .map(|g| GoalOut {
                    cell: g.cell,
                    grid: g.grid,
                    pixel: g.pixel,
                    world: g.world,
                    score: g.score,
                })
                .collect(),
            trajectories,
            probability_map: ProbabilityMapOut {
                rows,
                cols,
                factor: prob.grid.dim().0.div_ceil(rows.max(1)),
                values: grid.iter().copied().collect(),
            },
        })
    }

    /// Runs a request off the async runtime while holding the model read lock,
    /// so a reload waits for it. Persists the run when a run log is configured.
    pub async fn predict(self: &Arc<Self>, mut req: GuidedPredictRequest, endpoint: &str) -> Result<PredictResponse, ServiceError> {
        let guard = Arc::clone(&self.models).read_owned().await;
        let models = guard.as_ref().cloned().ok_or(ServiceError::Unavailable)?;
        if req.seed.is_none() {
            req.seed = Some(rand::random());
        }
        let this = Arc::clone(self);
        let (req, resp) = tokio::task::spawn_blocking(move || {
            let _guard = guard;
            let r = this.compute(&models, &req);
            r.map(|resp| (req, resp))
        })
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
        if let Some(log) = &self.runs {
            log.append(&RunRecord::new(endpoint, req, resp.clone()))?;
        }
        Ok(resp)
    }

    /// Recomputes a persisted run against the loaded models.
    pub async fn replay(self: &Arc<Self>, record: &RunRecord) -> Result<PredictResponse, ServiceError> {
        let guard = Arc::clone(&self.models).read_owned().await;
        let models = guard.as_ref().cloned().ok_or(ServiceError::Unavailable)?;
        if models.hashes != record.checkpoints {
            return Err(ServiceError::BadRequest("the run was served by different checkpoints".into()));
        }
        let this = Arc::clone(self);
        let req = record.request.clone();
        tokio::task::spawn_blocking(move || {
            let _guard = guard;
            this.compute(&models, &req)
        })
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
    }

    /// Swaps in new models once in-flight requests finish, and clears every
    /// cache derived from the old ones.
    pub async fn install(&self, models: Models) -> Health {
        let mut m = self.models.write().await;
        *m = Some(Arc::new(models));
        self.logits.clear();
        drop(m);
        self.health().await
    }

    /// Loads checkpoints from the request paths, falling back to the configured ones.
    pub async fn reload(&self, req: ReloadRequest) -> Result<Health, ServiceError> {
        let goal = req
            .goal_checkpoint
            .or_else(|| self.config.goal_checkpoint.clone())
            .ok_or_else(|| ServiceError::Validation {
                field: "goal_checkpoint".into(),
                msg: "no path given or configured".into(),
            })?;
        let llm = req
            .llm_checkpoint
            .or_else(|| self.config.llm_checkpoint.clone())
            .ok_or_else(|| ServiceError::Validation {
                field: "llm_checkpoint".into(),
                msg: "no path given or configured".into(),
            })?;
        let models = tokio::task::spawn_blocking(move || Models::load(&goal, &llm))
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))??;
        Ok(self.install(models).await)
    }
}
