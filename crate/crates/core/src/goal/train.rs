use std::collections::HashMap;
use std::sync::Arc;

use candle_core::{Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::maps::make_goal_target;
use super::model::{GoalModel, GoalModelConfig};
use crate::dataset::{ObservationWindow, Scene};
use crate::error::{Error, Result};
use crate::nn::{bce_with_logits, cosine_lr, EpochStats, TrainingCurve};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Final learning rate as a fraction of the initial one.
    pub lr_floor: f64,
    pub seed: u64,
    /// Cap on `(window, pedestrian)` samples, chosen by seed.
    #[serde(default)]
    pub max_samples: Option<usize>,
}

impl Default for GoalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            lr_floor: 0.0,
            seed: 0,
            max_samples: None,
        }
    }
}

impl GoalTrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            lr_floor: 0.05,
            seed: 0,
            max_samples: Some(1200),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        Ok(())
    }
}

pub struct GoalTrainOutput {
    pub model: GoalModel,
    pub curve: TrainingCurve,
    pub samples: usize,
    /// Samples dropped because the final position left the grid.
    pub skipped_out_of_bounds: usize,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
}

struct Sample {
    id: String,
    features: Vec<Option<Tensor>>,
    vis: Option<Tensor>,
    sem: Tensor,
    target: Tensor,
}

fn batch_features(samples: &[&Sample]) -> Result<Vec<Option<Tensor>>> {
    let depth = samples[0].features.len();
    (0..depth)
        .map(|l| match &samples[0].features[l] {
            None => Ok(None),
            Some(_) => {
                let parts: Vec<Tensor> = samples
                    .iter()
                    .map(|s| s.features[l].clone().expect("same layout"))
                    .collect();
                Ok(Some(Tensor::cat(&parts, 0)?))
            }
        })
        .collect()
}

fn batch_loss(model: &GoalModel, batch: &[&Sample]) -> Result<Tensor> {
    let sem = Tensor::cat(&batch.iter().map(|s| s.sem.clone()).collect::<Vec<_>>(), 0)?;
    let target = Tensor::cat(&batch.iter().map(|s| s.target.clone()).collect::<Vec<_>>(), 0)?;
    let logits = if model.config().encoder.frozen {
        model.decode(&batch_features(batch)?, &sem)?
    } else {
        let vis = Tensor::cat(
            &batch.iter().map(|s| s.vis.clone().expect("kept when unfrozen")).collect::<Vec<_>>(),
            0,
        )?;
        model.forward(&vis, &sem)?
    };
    bce_with_logits(&logits.squeeze(1)?, &target)
}

fn full_loss(model: &GoalModel, samples: &[Sample], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let l: f64 = batch_loss(model, &refs)?.to_dtype(candle_core::DType::F64)?.to_scalar()?;
        total += l * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains the goal module with BCE against gaussian target maps. Frozen encoder
/// features are computed once and cached.
pub fn train_goal_module(
    scenes: &HashMap<String, Arc<Scene>>,
    windows: &[ObservationWindow],
    model_cfg: GoalModelConfig,
    cfg: &GoalTrainConfig,
) -> Result<GoalTrainOutput> {
    cfg.validate()?;
    let model = GoalModel::new(model_cfg, &candle_core::Device::Cpu)?;
    train_model(model, scenes, windows, cfg)
}

/// As [`train_goal_module`], continuing from an existing model.
pub fn train_model(
    model: GoalModel,
    scenes: &HashMap<String, Arc<Scene>>,
    windows: &[ObservationWindow],
    cfg: &GoalTrainConfig,
) -> Result<GoalTrainOutput> {
    cfg.validate()?;
    let encoder_hash_before = model.encoder_hash()?;

    let mut pairs: Vec<(usize, usize)> = windows
        .iter()
        .enumerate()
        .flat_map(|(w, win)| (0..win.num_pedestrians()).map(move |i| (w, i)))
        .collect();
    if let Some(cap) = cfg.max_samples {
        if pairs.len() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
            pairs.shuffle(&mut rng);
            pairs.truncate(cap);
            pairs.sort_unstable();
        }
    }

    let mcfg = model.config().clone();
    let mut samples = Vec::new();
    let mut skipped = 0;
    let enc_batch = 32;
    for chunk in pairs.chunks(enc_batch) {
        let mut inputs = Vec::new();
        let mut meta = Vec::new();
        for &(w, i) in chunk {
            let win = &windows[w];
            let scene = scenes
                .get(&win.scene_id)
                .ok_or_else(|| Error::Reference(format!("unknown scene {}", win.scene_id)))?;
            let spec = mcfg.grid_spec(scene);
            let target = match make_goal_target(win.final_position(i), &scene.homography, &spec, mcfg.target_sigma) {
                Ok(t) => t,
                Err(Error::OutOfBounds(msg)) => {
                    log::debug!("window {} pedestrian {i} excluded: {msg}", win.id());
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            inputs.push(model.build_inputs(scene, &win.past[i])?);
            meta.push((format!("{}#{}", win.id(), win.pedestrian_ids[i]), target));
        }
        if inputs.is_empty() {
            continue;
        }
        let refs: Vec<_> = inputs.iter().collect();
        let (vis, sem) = model.input_tensors(&refs)?;
        let feats = if mcfg.encoder.frozen {
            Some(model.visual_features(&vis)?)
        } else {
            None
        };
        let g = mcfg.grid_size;
        for (k, (id, target)) in meta.into_iter().enumerate() {
            let features = match &feats {
                Some(f) => f
                    .iter()
                    .map(|t| t.as_ref().map(|t| t.narrow(0, k, 1)?.contiguous()).transpose())
                    .collect::<candle_core::Result<Vec<_>>>()?,
                None => vec![None; mcfg.widths.len()],
            };
            let target = Tensor::from_vec(target.into_raw_vec_and_offset().0, (1, g, g), model.device())?
                .to_dtype(model.dtype())?;
            samples.push(Sample {
                id,
                features,
                vis: (!mcfg.encoder.frozen).then(|| vis.narrow(0, k, 1)).transpose()?,
                sem: sem.narrow(0, k, 1)?.contiguous()?,
                target,
            });
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} samples excluded from the goal loss: final position outside the grid");
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no goal-module training samples".into()));
    }

    let params = ParamsAdamW {
        lr: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut opt = AdamW::new(model.trainable_vars(), params)?;
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;

    let initial_loss = full_loss(&model, &samples, 64)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epochs = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut lr = cfg.learning_rate;
        for chunk in order.chunks(cfg.batch_size) {
            lr = cosine_lr(step, total, cfg.learning_rate, cfg.lr_floor);
            opt.set_learning_rate(lr);
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let loss = batch_loss(&model, &batch)?;
            let v: f64 = loss.to_dtype(candle_core::DType::F64)?.to_scalar()?;
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    learning_rate: lr,
                    batch: batch.iter().map(|s| s.id.clone()).collect(),
                });
            }
            opt.backward_step(&loss)?;
            sum += v * chunk.len() as f64;
            step += 1;
        }
        let mean_loss = sum / samples.len() as f64;
        log::info!("goal epoch {epoch}: loss {mean_loss:.5} lr {lr:.2e}");
        epochs.push(EpochStats {
            epoch,
            mean_loss,
            learning_rate: lr,
        });
    }
    let final_loss = full_loss(&model, &samples, 64)?;
    let encoder_hash_after = model.encoder_hash()?;
    Ok(GoalTrainOutput {
        curve: TrainingCurve {
            initial_loss,
            final_loss,
            epochs,
        },
        samples: samples.len(),
        skipped_out_of_bounds: skipped,
        encoder_hash_before,
        encoder_hash_after,
        model,
    })
}

/// Mean BCE of the model on one batch of inputs, exposed for gradient checks.
pub fn goal_loss(model: &GoalModel, vis: &Tensor, sem: &Tensor, target: &Tensor) -> Result<Tensor> {
    let logits = model.forward(vis, sem)?;
    bce_with_logits(&logits.squeeze(1)?, target)
}

/// Index of the best cell per batch item for a `(B, 1, G, G)` logit tensor.
pub fn argmax_cells(logits: &Tensor) -> Result<Vec<usize>> {
    let b = logits.dim(0)?;
    Ok(logits.reshape((b, ()))?.argmax(D::Minus1)?.to_vec1::<u32>()?.into_iter().map(|v| v as usize).collect())
}
