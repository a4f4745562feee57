use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{conv2d, Conv2d, Conv2dConfig, VarBuilder};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::encoder::{EncoderConfig, VisualEncoder};
use super::maps::{GoalLogitMap, GridSpec};
use crate::dataset::{ObservationWindow, Scene};
use crate::error::{Error, Result};
use crate::nn::{hash_tensors, load_safetensors, save_safetensors, SeededVarMap};
use crate::raster::resize_bilinear;
use crate::render::{
    build_semantic_condition, composite, draw_prompt, render_heatmap, PromptShape, SemanticCondition,
    VisualCondition, VisualPromptStyle,
};
use crate::Vec2;

pub const GOAL_CHECKPOINT_FORMAT: &str = "guidecot-goal/1";

/// Which conditions reach the goal module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    #[default]
    Both,
    /// Visual features are not injected.
    SemOnly,
    /// The semantic branch sees an all-zero input.
    VisOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalModelConfig {
    pub encoder: EncoderConfig,
    /// Side of the square goal grid, also the semantic-branch resolution.
    pub grid_size: usize,
    /// U-Net channel widths, one per level; level `l` runs at `grid_size / 2^l`.
    pub widths: Vec<usize>,
    /// U-Net level receiving each exposed encoder stage.
    pub inject_levels: Vec<usize>,
    pub mode: ConditionMode,
    /// History heatmap sigma, in grid cells.
    pub heatmap_sigma: f64,
    /// Target map sigma, in grid cells.
    pub target_sigma: f64,
    pub prompt: VisualPromptStyle,
    /// Number of semantic classes.
    pub num_classes: usize,
    pub seed: u64,
}

impl GoalModelConfig {
    /// Full-size layout: ResNet-50 features at 224 px, 128-cell grid.
    pub fn full(encoder: EncoderConfig) -> Self {
        Self {
            encoder,
            grid_size: 128,
            widths: vec![32, 64, 128, 256, 256],
            inject_levels: vec![1, 2, 3, 4],
            mode: ConditionMode::Both,
            heatmap_sigma: 4.0,
            target_sigma: 4.0,
            prompt: VisualPromptStyle::default(),
            num_classes: 3,
            seed: 0,
        }
    }

    /// Desk-scale layout: toy encoder at 64 px, 32-cell grid.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::toy(64),
            grid_size: 32,
            widths: vec![8, 16, 16],
            inject_levels: vec![0, 1, 2],
            mode: ConditionMode::Both,
            heatmap_sigma: 1.0,
            target_sigma: 1.0,
            prompt: VisualPromptStyle::default().scaled(0.5),
            num_classes: 3,
            seed: 0,
        }
    }

    pub fn grid_spec(&self, scene: &Scene) -> GridSpec {
        GridSpec::for_scene(self.grid_size, self.grid_size, scene.height(), scene.width())
    }

    fn level_side(&self, l: usize) -> usize {
        self.grid_size >> l
    }

    /// Visual channels concatenated at each U-Net level.
    fn visual_channels(&self) -> Vec<usize> {
        let mut out = vec![0; self.widths.len()];
        if self.mode != ConditionMode::SemOnly {
            for (&(c, _), &l) in self.encoder.stage_shapes().iter().zip(&self.inject_levels) {
                out[l] += c;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prompt.validate()?;
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::param("widths", "need at least one positive width"));
        }
        let depth = self.widths.len();
        if self.grid_size == 0 || self.grid_size % (1 << (depth - 1)) != 0 {
            return Err(Error::Architecture(format!(
                "grid {} is not divisible by 2^{} for a {depth}-level U-Net",
                self.grid_size,
                depth - 1
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::param("num_classes", "must be positive"));
        }
        for (name, v) in [("heatmap_sigma", self.heatmap_sigma), ("target_sigma", self.target_sigma)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::param(name, "must be positive"));
            }
        }
        let stages = self.encoder.stage_shapes();
        if self.inject_levels.len() != stages.len() {
            return Err(Error::Architecture(format!(
                "{} encoder stages exposed but {} injection levels given",
                stages.len(),
                self.inject_levels.len()
            )));
        }
        for (&(c, side), &l) in stages.iter().zip(&self.inject_levels) {
            if l >= depth {
                return Err(Error::Architecture(format!(
                    "injection level {l} exceeds U-Net depth {depth}"
                )));
            }
            let target = self.level_side(l);
            let integer = side % target == 0 || target % side == 0;
            if !integer && !self.encoder.frozen {
                return Err(Error::Architecture(format!(
                    "stage of {c} channels at {side}x{side} cannot be resized to {target}x{target} \
                     with gradients; use an integer ratio or freeze the encoder"
                )));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Resizes `(B, C, s, s)` to `(B, C, t, t)`.
fn resize_square(x: &Tensor, target: usize) -> Result<Tensor> {
    let side = x.dim(2)?;
    Ok(if side == target {
        x.clone()
    } else if side % target == 0 {
        x.avg_pool2d(side / target)?
    } else {
        x.upsample_nearest2d(target, target)?
    })
}

struct GoalNet {
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
    head: Conv2d,
}

impl GoalNet {
    fn new(cfg: &GoalModelConfig, vb: VarBuilder) -> Result<Self> {
        let conv = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let vis = cfg.visual_channels();
        let depth = cfg.widths.len();
        let mut enc = Vec::new();
        let mut cin = 1 + cfg.num_classes;
        for (l, &w) in cfg.widths.iter().enumerate() {
            enc.push(conv2d(cin, w, 3, conv, vb.pp(format!("enc{l}")))?);
            cin = w;
        }
        let mut dec = Vec::new();
        for l in 0..depth {
            let from_below = if l + 1 < depth { cfg.widths[l + 1] } else { 0 };
            let cin = from_below + cfg.widths[l] + vis[l];
            dec.push(conv2d(cin, cfg.widths[l], 3, conv, vb.pp(format!("dec{l}")))?);
        }
        let head = conv2d(cfg.widths[0], 1, 1, Default::default(), vb.pp("head"))?;
        Ok(Self { enc, dec, head })
    }

    /// `visual[l]` holds the features injected at level `l`, if any.
    fn forward(&self, sem: &Tensor, visual: &[Option<Tensor>]) -> Result<Tensor> {
        let mut skips = Vec::new();
        let mut x = sem.clone();
        for (l, conv) in self.enc.iter().enumerate() {
            if l > 0 {
                x = x.avg_pool2d(2)?;
            }
            x = candle_nn::ops::silu(&conv.forward(&x)?)?;
            skips.push(x.clone());
        }
        let depth = self.enc.len();
        let mut y: Option<Tensor> = None;
        for l in (0..depth).rev() {
            let mut parts = Vec::new();
            if let Some(below) = &y {
                let side = skips[l].dim(2)?;
                parts.push(below.upsample_nearest2d(side, side)?);
            }
            parts.push(skips[l].clone());
            if let Some(v) = &visual[l] {
                parts.push(v.clone());
            }
            let cat = Tensor::cat(&parts, 1)?;
            y = Some(candle_nn::ops::silu(&self.dec[l].forward(&cat)?)?);
        }
        Ok(self.head.forward(&y.expect("depth >= 1"))?)
    }
}

/// Both model inputs as tensors: visual `(3, S, S)` and semantic `(1 + C, G, G)`.
#[derive(Debug, Clone)]
pub struct GoalInputs {
    pub visual: VisualCondition,
    pub semantic: SemanticCondition,
}

/// The goal module: a visual encoder plus the fusion U-Net.
pub struct GoalModel {
    cfg: GoalModelConfig,
    vars: SeededVarMap,
    encoder: VisualEncoder,
    net: GoalNet,
    device: Device,
    dtype: DType,
}

impl GoalModel {
    pub fn new(cfg: GoalModelConfig, device: &Device) -> Result<Self> {
        Self::with_dtype(cfg, DType::F32, device)
    }

    pub fn with_dtype(cfg: GoalModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let vars = SeededVarMap::new(cfg.seed);
        // The toy encoder's "pretrained" weights depend on their own seed only.
        let enc_vars = if cfg.encoder.backend == super::EncoderBackend::ToyCnn {
            SeededVarMap::new(cfg.encoder.toy_seed)
        } else {
            vars.clone()
        };
        let encoder = VisualEncoder::new(&cfg.encoder, &enc_vars, dtype, device)?;
        if cfg.encoder.backend == super::EncoderBackend::ToyCnn {
            // Move the toy encoder's variables into the shared map.
            let mut data = vars.var_map().data().lock().expect("var map lock");
            for (k, v) in enc_vars.vars() {
                data.insert(k, v);
            }
        }
        let net = GoalNet::new(&cfg, vars.var_builder(dtype, device).pp("net"))?;
        Ok(Self {
            cfg,
            vars,
            encoder,
            net,
            device: device.clone(),
            dtype,
        })
    }

    pub fn config(&self) -> &GoalModelConfig {
        &self.cfg
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn vars(&self) -> &SeededVarMap {
        &self.vars
    }

    /// Variables the optimizer updates.
    pub fn trainable_vars(&self) -> Vec<candle_core::Var> {
        self.vars
            .vars()
            .into_iter()
            .filter(|(k, _)| {
                k.starts_with("net.") || (!self.cfg.encoder.frozen && VisualEncoder::is_trainable_name(k))
            })
            .map(|(_, v)| v)
            .collect()
    }

    pub fn encoder_hash(&self) -> Result<String> {
        let t: BTreeMap<_, _> = self
            .vars
            .tensors()
            .into_iter()
            .filter(|(k, _)| k.starts_with("encoder."))
            .collect();
        hash_tensors(&t)
    }

    /// Hash of every weight plus the configuration.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.cfg.hash());
        h.update(hash_tensors(&self.vars.tensors())?);
        Ok(hex::encode(h.finalize()))
    }

    /// Renders the visual and semantic conditions for a past trajectory in world meters.
    pub fn build_inputs(&self, scene: &Scene, past_world: &[Vec2]) -> Result<GoalInputs> {
        build_inputs(&self.cfg, scene, past_world)
    }

    /// Stacks inputs into `(B, 3, S, S)` and `(B, 1 + C, G, G)` tensors.
    pub fn input_tensors(&self, inputs: &[&GoalInputs]) -> Result<(Tensor, Tensor)> {
        let s = self.cfg.encoder.input_size;
        let g = self.cfg.grid_size;
        let c = 1 + self.cfg.num_classes;
        let mut vis = Vec::with_capacity(inputs.len() * 3 * s * s);
        let mut sem = Vec::with_capacity(inputs.len() * c * g * g);
        for inp in inputs {
            let img = resize_bilinear(&inp.visual.raster, s, s);
            // (H, W, 3) -> (3, H, W)
            vis.extend(img.permuted_axes([2, 0, 1]).iter().copied());
            if inp.semantic.tensor.dim() != (c, g, g) {
                return Err(Error::Dimension(format!(
                    "semantic condition {:?}, expected ({c}, {g}, {g})",
                    inp.semantic.tensor.dim()
                )));
            }
            sem.extend(inp.semantic.tensor.iter().copied());
        }
        let b = inputs.len();
        let vis = Tensor::from_vec(vis, (b, 3, s, s), &self.device)?.to_dtype(self.dtype)?;
        let sem = Tensor::from_vec(sem, (b, c, g, g), &self.device)?.to_dtype(self.dtype)?;
        Ok((vis, sem))
    }

    /// Encoder features resized to their injection levels, one entry per U-Net level.
    pub fn visual_features(&self, vis: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let depth = self.cfg.widths.len();
        let mut out: Vec<Option<Tensor>> = vec![None; depth];
        if self.cfg.mode == ConditionMode::SemOnly {
            return Ok(out);
        }
        let feats = self.encoder.encode(vis)?;
        for (f, &l) in feats.into_iter().zip(&self.cfg.inject_levels) {
            let r = resize_square(&f, self.cfg.level_side(l))?;
            out[l] = Some(match out[l].take() {
                Some(prev) => Tensor::cat(&[prev, r], 1)?,
                None => r,
            });
        }
        Ok(out)
    }

    /// Logits `(B, 1, G, G)` from precomputed visual features.
    pub fn decode(&self, features: &[Option<Tensor>], sem: &Tensor) -> Result<Tensor> {
        let sem = if self.cfg.mode == ConditionMode::VisOnly {
            sem.zeros_like()?
        } else {
            sem.clone()
        };
        self.net.forward(&sem, features)
    }

    pub fn forward(&self, vis: &Tensor, sem: &Tensor) -> Result<Tensor> {
        let f = self.visual_features(vis)?;
        self.decode(&f, sem)
    }

    /// Goal logits for pedestrians `indices` of one window.
    pub fn predict_logits(
        &self,
        scene: &Scene,
        window: &ObservationWindow,
        indices: &[usize],
    ) -> Result<Vec<GoalLogitMap>> {
        let inputs: Vec<GoalInputs> = indices
            .iter()
            .map(|&i| {
                let past = window.past.get(i).ok_or_else(|| {
                    Error::Input(format!("pedestrian index {i} out of range for window {}", window.id()))
                })?;
                self.build_inputs(scene, past)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&GoalInputs> = inputs.iter().collect();
        let (vis, sem) = self.input_tensors(&refs)?;
        let logits = self.forward(&vis, &sem)?;
        let spec = self.cfg.grid_spec(scene);
        let g = self.cfg.grid_size;
        let flat: Vec<f64> = logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        Ok(flat
            .chunks(g * g)
            .map(|c| GoalLogitMap {
                grid: Array2::from_shape_vec((g, g), c.to_vec()).expect("chunk size"),
                spec,
            })
            .collect())
    }

    /// Writes weights and configuration to one safetensors file. Frozen toy
    /// encoder weights are rebuilt from their seed and are not stored.
    pub fn save(&self, path: &Path) -> Result<()> {
        let store_encoder = !self.cfg.encoder.frozen;
        let tensors: BTreeMap<String, Tensor> = self
            .vars
            .tensors()
            .into_iter()
            .filter(|(k, _)| k.starts_with("net.") || store_encoder)
            .collect();
        let mut meta = HashMap::new();
        meta.insert("format".into(), GOAL_CHECKPOINT_FORMAT.into());
        meta.insert("config".into(), serde_json::to_string(&self.cfg)?);
        meta.insert("config_hash".into(), self.cfg.hash());
        meta.insert("encoder_hash".into(), self.encoder_hash()?);
        save_safetensors(path, &tensors, meta)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let (tensors, meta) = load_safetensors(path, device)?;
        if meta.get("format").map(String::as_str) != Some(GOAL_CHECKPOINT_FORMAT) {
            return Err(Error::checkpoint(path, "not a goal-module checkpoint"));
        }
        let cfg: GoalModelConfig = serde_json::from_str(
            meta.get("config")
                .ok_or_else(|| Error::checkpoint(path, "missing config"))?,
        )?;
        let model = Self::new(cfg, device)?;
        for (name, var) in model.vars.vars() {
            match tensors.get(&name) {
                Some(t) => {
                    if t.dims() != var.dims() {
                        return Err(Error::checkpoint(path, format!("shape mismatch on {name}")));
                    }
                    var.set(&t.to_dtype(var.dtype())?)?;
                }
                None if name.starts_with("net.") => {
                    return Err(Error::checkpoint(path, format!("missing tensor {name}")));
                }
                None => {}
            }
        }
        if let Some(want) = meta.get("encoder_hash") {
            if &model.encoder_hash()? != want {
                return Err(Error::checkpoint(
                    path,
                    "encoder weights differ from the ones the goal module was trained with",
                ));
            }
        }
        Ok(model)
    }
}

/// See [`GoalModel::build_inputs`].
pub fn build_inputs(cfg: &GoalModelConfig, scene: &Scene, past_world: &[Vec2]) -> Result<GoalInputs> {
    let pixels: Vec<Vec2> = past_world
        .iter()
        .map(|&p| scene.homography.world_to_pixel(p))
        .collect::<Result<_>>()?;
    let (h, w) = (scene.height(), scene.width());
    let layer = match draw_prompt(&pixels, &cfg.prompt, h, w) {
        Err(Error::DegenerateHeading) if cfg.prompt.shape == PromptShape::Arrow => {
            // A standing pedestrian has no heading; mark it with points instead.
            let style = VisualPromptStyle {
                shape: PromptShape::Points,
                ..cfg.prompt
            };
            draw_prompt(&pixels, &style, h, w)?
        }
        other => other?,
    };
    let visual = composite(&scene.image, &layer, cfg.prompt.alpha)?;
    let spec = cfg.grid_spec(scene);
    let grid_traj: Vec<Vec2> = pixels.iter().map(|&p| spec.pixel_to_grid(p)).collect();
    let heatmap = render_heatmap(&grid_traj, cfg.heatmap_sigma, cfg.grid_size, cfg.grid_size)?;
    let semantic = scene.semantic.resized(cfg.grid_size, cfg.grid_size);
    if semantic.num_classes() != cfg.num_classes {
        return Err(Error::Config(format!(
            "scene {} has {} semantic classes, the model expects {}",
            scene.id,
            semantic.num_classes(),
            cfg.num_classes
        )));
    }
    let semantic = build_semantic_condition(&heatmap, &semantic.one_hot())?;
    Ok(GoalInputs { visual, semantic })
}
