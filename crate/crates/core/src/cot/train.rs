use std::collections::HashMap;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{decoder_input, Seq2Seq, SeqModelConfig};
use super::prompt::PromptDocument;
use super::tokenizer::{EOS, PAD};
use crate::dataset::{ObservationWindow, Scene};
use crate::error::{Error, Result};
use crate::nn::{cosine_lr, EpochStats, TrainingCurve};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Linear warm-up steps before the cosine decay.
    pub warmup_steps: usize,
    pub lr_floor: f64,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub max_samples: Option<usize>,
    /// Samples used to measure the loss before and after training.
    pub eval_samples: usize,
}

impl Default for LlmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 3e-4,
            weight_decay: 1e-2,
            warmup_steps: 500,
            lr_floor: 0.0,
            grad_clip: Some(1.0),
            seed: 0,
            max_samples: None,
            eval_samples: 512,
        }
    }
}

impl LlmTrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            warmup_steps: 40,
            lr_floor: 0.05,
            grad_clip: Some(1.0),
            seed: 0,
            max_samples: Some(480),
            eval_samples: 128,
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
        if self.eval_samples == 0 {
            return Err(Error::param("eval_samples", "must be positive"));
        }
        Ok(())
    }
}

/// Token ids of one training document.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub id: String,
    /// Question and goal sentence.
    pub source: Vec<u32>,
    /// Answer tokens without markers.
    pub target: Vec<u32>,
}

/// Ground-truth documents for every `(window, pedestrian)` pair, keyed `window#pedestrian_id`.
pub fn build_corpus(
    scenes: &HashMap<String, Arc<Scene>>,
    windows: &[ObservationWindow],
    cfg: &SeqModelConfig,
) -> Result<Vec<(String, PromptDocument)>> {
    let mut out = Vec::new();
    for w in windows {
        let scene = scenes
            .get(&w.scene_id)
            .ok_or_else(|| Error::Reference(format!("unknown scene {}", w.scene_id)))?;
        for i in 0..w.num_pedestrians() {
            let doc = PromptDocument::from_ground_truth(w, i, &scene.homography, &cfg.prompt)?;
            out.push((format!("{}#{}", w.id(), w.pedestrian_ids[i]), doc));
        }
    }
    Ok(out)
}

/// Tokenizes documents and checks them against the model's context lengths.
pub fn encode_corpus(model: &Seq2Seq, docs: &[(String, PromptDocument)]) -> Result<Vec<EncodedExample>> {
    let cfg = model.config();
    docs.iter()
        .map(|(id, doc)| {
            let source = model.encode_text(&doc.source())?;
            let target = model.encode_text(&doc.answer)?;
            if source.len() > cfg.max_source_len {
                return Err(Error::Config(format!(
                    "prompt {id} has {} tokens, over the context length {}",
                    source.len(),
                    cfg.max_source_len
                )));
            }
            if target.len() + 1 > cfg.max_target_len {
                return Err(Error::Config(format!(
                    "answer {id} has {} tokens, over the decoder length {}",
                    target.len(),
                    cfg.max_target_len
                )));
            }
            Ok(EncodedExample {
                id: id.clone(),
                source,
                target,
            })
        })
        .collect()
}

/// A padded batch. The encoder sees question and goal sentence; only answer
/// tokens and the end marker count towards the loss.
pub struct Batch {
    pub src: Tensor,
    pub src_valid: Tensor,
    pub tgt_in: Tensor,
    pub tgt_out: Vec<u32>,
    /// 1 where `tgt_out` is a scored token.
    pub loss_mask: Vec<u8>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn new(examples: &[&EncodedExample], device: &Device) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let b = examples.len();
        let ls = examples.iter().map(|e| e.source.len()).max().unwrap_or(0).max(1);
        let lt = examples.iter().map(|e| e.target.len() + 1).max().unwrap_or(1);
        let mut src = vec![PAD; b * ls];
        let mut valid = vec![0u32; b * ls];
        let mut tgt_in = vec![PAD; b * lt];
        let mut tgt_out = vec![PAD; b * lt];
        let mut loss_mask = vec![0u8; b * lt];
        for (r, e) in examples.iter().enumerate() {
            for (k, &t) in e.source.iter().enumerate() {
                src[r * ls + k] = t;
                valid[r * ls + k] = 1;
            }
            let inp = decoder_input(&e.target);
            for (k, &t) in inp.iter().enumerate() {
                tgt_in[r * lt + k] = t;
            }
            for (k, &t) in e.target.iter().chain(std::iter::once(&EOS)).enumerate() {
                tgt_out[r * lt + k] = t;
                loss_mask[r * lt + k] = 1;
            }
        }
        Ok(Self {
            src: Tensor::from_vec(src, (b, ls), device)?,
            src_valid: Tensor::from_vec(valid, (b, ls), device)?,
            tgt_in: Tensor::from_vec(tgt_in, (b, lt), device)?,
            tgt_out,
            loss_mask,
            ids: examples.iter().map(|e| e.id.clone()).collect(),
        })
    }

    pub fn target_token_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Mean teacher-forced cross-entropy over the scored answer tokens.
pub fn sequence_loss(model: &Seq2Seq, batch: &Batch) -> Result<Tensor> {
    let dev = model.device();
    let memory = model.encode(&batch.src, &batch.src_valid)?;
    let hidden = model.decode(&batch.tgt_in, &memory)?;
    let lp = model.log_probs(&hidden, &memory)?;
    let rows: Vec<u32> = (0..batch.loss_mask.len() as u32)
        .filter(|&k| batch.loss_mask[k as usize] == 1)
        .collect();
    let targets: Vec<u32> = rows.iter().map(|&k| batch.tgt_out[k as usize]).collect();
    let n = rows.len();
    let picked = lp
        .reshape(((), model.tokenizer().vocab_size()))?
        .index_select(&Tensor::from_vec(rows, n, dev)?, 0)?;
    Ok(candle_nn::loss::nll(&picked, &Tensor::from_vec(targets, n, dev)?)?)
}

fn mean_loss(model: &Seq2Seq, examples: &[&EncodedExample], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in examples.chunks(batch) {
        let b = Batch::new(chunk, model.device())?;
        let n = b.target_token_count();
        let l: f64 = sequence_loss(model, &b)?.to_dtype(DType::F64)?.to_scalar()?;
        total += l * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

pub struct LlmTrainOutput {
    pub model: Seq2Seq,
    pub curve: TrainingCurve,
    pub samples: usize,
}

/// Trains a fresh model on ground-truth documents built from `windows`.
pub fn train_llm(
    scenes: &HashMap<String, Arc<Scene>>,
    windows: &[ObservationWindow],
    model_cfg: SeqModelConfig,
    cfg: &LlmTrainConfig,
) -> Result<LlmTrainOutput> {
    cfg.validate()?;
    let model = Seq2Seq::new(model_cfg, &Device::Cpu)?;
    let docs = build_corpus(scenes, windows, model.config())?;
    let examples = encode_corpus(&model, &docs)?;
    train_seq_model(model, examples, cfg)
}

/// Trains `model` on already encoded examples.
pub fn train_seq_model(model: Seq2Seq, mut examples: Vec<EncodedExample>, cfg: &LlmTrainConfig) -> Result<LlmTrainOutput> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyDataset("no sequence-model training samples".into()));
    }
    if let Some(cap) = cfg.max_samples {
        if examples.len() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
            examples.shuffle(&mut rng);
            examples.truncate(cap);
            examples.sort_by(|a, b| a.id.cmp(&b.id));
        }
    }
    let eval: Vec<&EncodedExample> = examples.iter().step_by(examples.len().div_ceil(cfg.eval_samples)).collect();

    let vars: Vec<_> = model.vars().vars().into_iter().map(|(_, v)| v).collect();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let initial_loss = mean_loss(&model, &eval, 32)?;
    log::info!("llm: {} samples, {} parameters, initial loss {initial_loss:.4}", examples.len(), model.num_params());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epochs = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut tokens = 0usize;
        let mut lr = cfg.learning_rate;
        for chunk in order.chunks(cfg.batch_size) {
            let warm = if cfg.warmup_steps > 0 {
                ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
            lr = warm * cosine_lr(step, total, cfg.learning_rate, cfg.lr_floor);
            opt.set_learning_rate(lr);
            let refs: Vec<&EncodedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let batch = Batch::new(&refs, model.device())?;
            let loss = sequence_loss(&model, &batch)?;
            let v: f64 = loss.to_dtype(DType::F64)?.to_scalar()?;
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    learning_rate: lr,
                    batch: batch.ids,
                });
            }
            let mut grads = loss.backward()?;
            if let Some(clip) = cfg.grad_clip {
                let mut sq = 0.0;
                for var in &vars {
                    if let Some(g) = grads.get(var.as_tensor()) {
                        sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                    }
                }
                let norm = sq.sqrt();
                if norm > clip {
                    for var in &vars {
                        if let Some(g) = grads.remove(var.as_tensor()) {
                            grads.insert(var.as_tensor(), (g * (clip / norm))?);
                        }
                    }
                }
            }
            opt.step(&grads)?;
            let n = batch.target_token_count();
            sum += v * n as f64;
            tokens += n;
            step += 1;
        }
        let mean_loss = sum / tokens.max(1) as f64;
        log::info!("llm epoch {epoch}: loss {mean_loss:.4} lr {lr:.2e}");
        epochs.push(EpochStats {
            epoch,
            mean_loss,
            learning_rate: lr,
        });
    }
    let final_loss = mean_loss(&model, &eval, 32)?;
    Ok(LlmTrainOutput {
        samples: examples.len(),
        curve: TrainingCurve {
            initial_loss,
            final_loss,
            epochs,
        },
        model,
    })
}
