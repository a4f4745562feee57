//! End-to-end inference: goal logits, optional guidance, goal sampling, one goal
//! sentence per sample and one generated trajectory per sentence.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cot::{
    cot_point, generate_batch, make_cot_sentence, serialize_observation, DecodeConfig, GeneratedTrajectory,
    GenerationRequest, Seq2Seq,
};
use crate::dataset::{ObservationWindow, Scene};
use crate::error::{Error, Result};
use crate::goal::{goal_probability, sample_goals, GoalLogitMap, GoalModel, GoalProbabilityMap, GoalSample, SamplingConfig};
use crate::guidance::{build_field, cell_center, GuidanceContext, GuidanceSpec};
use crate::Vec2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    /// Goals sampled, hence trajectories generated, per pedestrian.
    pub k: usize,
    pub sampling: SamplingConfig,
    pub decode: DecodeConfig,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            k: 20,
            sampling: SamplingConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub pedestrian_id: i64,
    pub question: String,
    pub goals: Vec<GoalSample>,
    /// One goal sentence per sampled goal.
    pub cots: Vec<String>,
    pub trajectories: Vec<GeneratedTrajectory>,
    /// Goal distribution after guidance.
    #[serde(skip)]
    pub probability: Option<GoalProbabilityMap>,
}

impl Prediction {
    pub fn fallback_count(&self) -> usize {
        self.trajectories.iter().filter(|t| t.is_fallback()).count()
    }

    pub fn worlds(&self) -> Vec<Vec<Vec2>> {
        self.trajectories.iter().map(|t| t.world.clone()).collect()
    }
}

/// Derives a stable seed from a base seed and a textual key.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Guidance geometry of pedestrian `i` in goal-grid units. Neighbour goals are
/// the argmax cells of their unguided maps in `logits`, which holds one map per
/// pedestrian of the window.
pub fn guidance_context(
    scene: &Scene,
    window: &ObservationWindow,
    i: usize,
    logits: &[GoalLogitMap],
) -> Result<GuidanceContext> {
    let spec = logits
        .get(i)
        .ok_or_else(|| Error::Input(format!("no goal logits for pedestrian index {i}")))?
        .spec;
    let h = &scene.homography;
    let past = &window.past[i];
    let current = spec.world_to_grid(h, window.current_position(i))?;
    let previous = if past.len() >= 2 {
        spec.world_to_grid(h, past[past.len() - 2])?
    } else {
        current
    };
    let mut neighbor_goals = HashMap::new();
    let mut neighbor_futures = HashMap::new();
    for (j, &pid) in window.pedestrian_ids.iter().enumerate() {
        if j == i {
            continue;
        }
        if let Some(map) = logits.get(j) {
            let (r, c) = goal_probability(map, None, 0.0)?.argmax();
            neighbor_goals.insert(pid, cell_center(r, c));
        }
        neighbor_futures.insert(pid, spec.world_to_grid(h, window.final_position(j))?);
    }
    Ok(GuidanceContext {
        previous,
        current,
        neighbor_goals,
        neighbor_futures,
    })
}

/// Goal logits for every pedestrian of the window, in window order.
pub fn window_logits(goal: &GoalModel, scene: &Scene, window: &ObservationWindow) -> Result<Vec<GoalLogitMap>> {
    let all: Vec<usize> = (0..window.num_pedestrians()).collect();
    goal.predict_logits(scene, window, &all)
}

/// Predicts pedestrian `i` from precomputed window logits. Neutral guidance
/// takes exactly the unguided path.
pub fn predict_from_logits(
    llm: &Seq2Seq,
    scene: &Scene,
    window: &ObservationWindow,
    i: usize,
    logits: &[GoalLogitMap],
    guidance: Option<&GuidanceSpec>,
    cfg: &PredictConfig,
    seed: u64,
) -> Result<Prediction> {
    if i >= window.num_pedestrians() {
        return Err(Error::Input(format!("pedestrian index {i} out of range for window {}", window.id())));
    }
    if logits.len() != window.num_pedestrians() {
        return Err(Error::Dimension(format!(
            "{} logit maps for {} pedestrians",
            logits.len(),
            window.num_pedestrians()
        )));
    }
    let map = &logits[i];
    let probability = match guidance {
        Some(g) if !g.is_neutral() => {
            let ctx = guidance_context(scene, window, i, logits)?;
            let (rows, cols) = map.grid.dim();
            let field = build_field(g, &ctx, rows, cols)?;
            goal_probability(map, Some(&field), g.lambda)?
        }
        Some(g) => {
            g.validate()?;
            goal_probability(map, None, 0.0)?
        }
        None => goal_probability(map, None, 0.0)?,
    };
    let h = &scene.homography;
    let goals = sample_goals(&probability, cfg.k, &cfg.sampling, seed, h)?;
    let prompt = &llm.config().prompt;
    let question = serialize_observation(window, i, prompt);
    let pred_len = window.pred_len();
    let cots: Vec<String> = goals
        .iter()
        .map(|g| Ok(make_cot_sentence(i, cot_point(g.world, h, prompt)?, pred_len, prompt.cot_decimals)))
        .collect::<Result<_>>()?;
    let requests: Vec<GenerationRequest> = cots
        .iter()
        .enumerate()
        .map(|(k, cot)| GenerationRequest {
            question: question.clone(),
            cot: cot.clone(),
            past: window.past[i].clone(),
            pred_len,
            seed: derive_seed(seed, &format!("generate#{k}")),
        })
        .collect();
    let trajectories = generate_batch(llm, &requests, &cfg.decode)?;
    Ok(Prediction {
        pedestrian_id: window.pedestrian_ids[i],
        question,
        goals,
        cots,
        trajectories,
        probability: Some(probability),
    })
}

/// Full prediction for pedestrian `i`: goal module, guidance, sampling, generation.
pub fn predict_full(
    goal: &GoalModel,
    llm: &Seq2Seq,
    scene: &Scene,
    window: &ObservationWindow,
    i: usize,
    guidance: Option<&GuidanceSpec>,
    cfg: &PredictConfig,
    seed: u64,
) -> Result<Prediction> {
    let logits = window_logits(goal, scene, window)?;
    predict_from_logits(llm, scene, window, i, &logits, guidance, cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cot::SeqModelConfig;
    use crate::dataset::{synth_scene, SceneLayout};
    use crate::goal::GoalModelConfig;
    use crate::guidance::GuidanceKind;
    use candle_core::Device;

    fn tiny_llm() -> Seq2Seq {
        let cfg = SeqModelConfig {
            d_model: 16,
            heads: 2,
            d_ff: 32,
            encoder_layers: 1,
            decoder_layers: 1,
            max_target_len: 12,
            ..SeqModelConfig::toy()
        };
        Seq2Seq::new(cfg, &Device::Cpu).unwrap()
    }

    fn fixture() -> (Scene, ObservationWindow) {
        let out = synth_scene(&SceneLayout::plaza(), 3).unwrap();
        let windows = crate::dataset::build_windows(
            &out.scene.id,
            &out.annotations,
            &crate::dataset::WindowConfig::default(),
            out.scene.frame_stride,
        )
        .unwrap();
        let w = windows.into_iter().find(|w| w.num_pedestrians() >= 2).unwrap();
        (out.scene, w)
    }

    #[test]
    fn seeds_are_stable_and_key_sensitive() {
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }

    #[test]
    fn neutral_guidance_equals_no_guidance() {
        let (scene, w) = fixture();
        let goal = GoalModel::new(GoalModelConfig::desk(), &Device::Cpu).unwrap();
        let llm = tiny_llm();
        let cfg = PredictConfig { k: 3, ..Default::default() };
        let logits = window_logits(&goal, &scene, &w).unwrap();
        let plain = predict_from_logits(&llm, &scene, &w, 0, &logits, None, &cfg, 5).unwrap();
        let none = GuidanceSpec {
            kind: GuidanceKind::None,
            lambda: 4.0,
        };
        let neutral = predict_from_logits(&llm, &scene, &w, 0, &logits, Some(&none), &cfg, 5).unwrap();
        assert_eq!(plain, neutral);
        assert_eq!(plain.goals.len(), 3);
        assert_eq!(plain.trajectories.len(), 3);
        for t in &plain.trajectories {
            assert_eq!(t.world.len(), w.pred_len());
        }
    }

    #[test]
    fn context_is_in_grid_units() {
        let (scene, w) = fixture();
        let goal = GoalModel::new(GoalModelConfig::desk(), &Device::Cpu).unwrap();
        let logits = window_logits(&goal, &scene, &w).unwrap();
        let ctx = guidance_context(&scene, &w, 0, &logits).unwrap();
        let spec = logits[0].spec;
        let expect = spec.world_to_grid(&scene.homography, w.current_position(0)).unwrap();
        assert_eq!(ctx.current, expect);
        assert_eq!(ctx.neighbor_goals.len(), w.num_pedestrians() - 1);
        assert!(!ctx.neighbor_goals.contains_key(&w.pedestrian_ids[0]));
        for g in ctx.neighbor_goals.values() {
            assert!(spec.contains(*g));
        }
    }

    #[test]
    fn unknown_group_neighbour_is_a_reference_error() {
        let (scene, w) = fixture();
        let goal = GoalModel::new(GoalModelConfig::desk(), &Device::Cpu).unwrap();
        let llm = tiny_llm();
        let g = GuidanceSpec::group(-99, 5.0, 2.0);
        let err = predict_full(&goal, &llm, &scene, &w, 0, Some(&g), &PredictConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Reference(_)), "{err}");
    }
}
