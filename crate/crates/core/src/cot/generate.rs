//! Decoding answers from the sequence model, with retries and a flagged fallback.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{DecodeConfig, DecodeStrategy, Seq2Seq};
use super::prompt::{parse_answer, source_text};
use super::tokenizer::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::eval::constant_velocity;
use crate::Vec2;

/// Raw decoder output for one row.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedText {
    pub text: String,
    /// False when the decoder ran out of length before the end marker.
    pub finished: bool,
}

fn pick(logits: &[f32], strategy: DecodeStrategy, cfg: &DecodeConfig, rng: &mut ChaCha8Rng) -> u32 {
    let greedy = || {
        let mut best = 0;
        for (k, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = k;
            }
        }
        best as u32
    };
    if strategy == DecodeStrategy::Greedy || cfg.temperature == 0.0 {
        return greedy();
    }
    let t = cfg.temperature;
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut probs: Vec<(f64, usize)> = logits
        .iter()
        .enumerate()
        .map(|(k, &v)| (((v as f64 - max) / t).exp(), k))
        .collect();
    let z: f64 = probs.iter().map(|p| p.0).sum();
    probs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for (p, k) in probs {
        kept.push((p, k));
        mass += p / z;
        if mass >= cfg.top_p {
            break;
        }
    }
    let total: f64 = kept.iter().map(|p| p.0).sum();
    let mut u = rng.random::<f64>() * total;
    for &(p, k) in &kept {
        if u < p {
            return k as u32;
        }
        u -= p;
    }
    kept.last().map(|&(_, k)| k as u32).unwrap_or_else(greedy)
}

/// Decodes one answer per source row. Each row samples from its own seeded generator,
/// so a row's output does not depend on what else is in the batch.
pub fn decode_batch(
    model: &Seq2Seq,
    sources: &[Vec<u32>],
    strategy: DecodeStrategy,
    cfg: &DecodeConfig,
    seeds: &[u64],
) -> Result<Vec<DecodedText>> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    if seeds.len() != sources.len() {
        return Err(Error::Dimension("one seed per source row is required".into()));
    }
    let dev = model.device();
    let b = sources.len();
    let ls = sources.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut src = vec![PAD; b * ls];
    let mut valid = vec![0u32; b * ls];
    for (r, s) in sources.iter().enumerate() {
        src[r * ls..r * ls + s.len()].copy_from_slice(s);
        valid[r * ls..r * ls + s.len()].fill(1);
    }
    let src = Tensor::from_vec(src, (b, ls), dev)?;
    let mut state = model.start(&src, &Tensor::from_vec(valid, (b, ls), dev)?)?;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut out: Vec<Vec<u32>> = vec![Vec::new(); b];
    let mut done = vec![false; b];
    let mut feed = vec![BOS; b];
    while state.position() < model.config().max_target_len && done.iter().any(|d| !d) {
        let logits: Vec<Vec<f32>> = model.step(&mut state, &feed)?.to_dtype(DType::F32)?.to_vec2()?;
        for r in 0..b {
            if done[r] {
                feed[r] = PAD;
                continue;
            }
            let tok = pick(&logits[r], strategy, cfg, &mut rngs[r]);
            if tok == EOS {
                done[r] = true;
                feed[r] = PAD;
            } else {
                out[r].push(tok);
                feed[r] = tok;
            }
        }
    }
    Ok(out
        .iter()
        .zip(done)
        .map(|(ids, finished)| DecodedText {
            text: model.tokenizer().decode_ids(ids),
            finished,
        })
        .collect())
}

/// Parses a decoded answer, treating a missing end marker as a failure.
pub fn parse_decoded(d: &DecodedText, pred_len: usize) -> Result<Vec<Vec2>> {
    if !d.finished {
        return Err(Error::DecodeFailure {
            reason: "no end marker before the decoder length".into(),
            raw: d.text.clone(),
        });
    }
    parse_answer(&d.text, pred_len)
}

/// Single generation without retries: errors carry the raw text.
pub fn generate_trajectory(
    model: &Seq2Seq,
    question: &str,
    cot: &str,
    cfg: &DecodeConfig,
    seed: u64,
    pred_len: usize,
) -> Result<Vec<Vec2>> {
    let src = model.encode_text(&source_text(question, cot))?;
    let d = decode_batch(model, &[src], cfg.strategy, cfg, &[seed])?;
    parse_decoded(&d[0], pred_len)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GenerationStatus {
    Ok,
    /// Parsed after `attempts` tries in total.
    Retried { attempts: usize },
    /// Every attempt failed; the trajectory is a constant-velocity extrapolation.
    Fallback { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTrajectory {
    /// World meters, one point per future step.
    pub world: Vec<Vec2>,
    /// Last decoded text.
    pub text: String,
    #[serde(flatten)]
    pub status: GenerationStatus,
}

impl GeneratedTrajectory {
    pub fn is_fallback(&self) -> bool {
        matches!(self.status, GenerationStatus::Fallback { .. })
    }
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub question: String,
    pub cot: String,
    /// Observed track in world meters, for the fallback.
    pub past: Vec<Vec2>,
    pub pred_len: usize,
    pub seed: u64,
}

fn retry_seed(seed: u64, attempt: usize) -> u64 {
    seed ^ (attempt as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Generates every request, retrying rows that do not parse with nucleus sampling
/// under fresh seeds, then falling back to constant velocity.
pub fn generate_batch(model: &Seq2Seq, requests: &[GenerationRequest], cfg: &DecodeConfig) -> Result<Vec<GeneratedTrajectory>> {
    cfg.validate()?;
    let sources: Vec<Vec<u32>> = requests
        .iter()
        .map(|r| model.encode_text(&source_text(&r.question, &r.cot)))
        .collect::<Result<_>>()?;
    let mut results: Vec<Option<GeneratedTrajectory>> = vec![None; requests.len()];
    let mut last: Vec<(String, String)> = vec![(String::new(), String::new()); requests.len()];
    let mut pending: Vec<usize> = (0..requests.len()).collect();
    for attempt in 0..=cfg.max_retries {
        if pending.is_empty() {
            break;
        }
        let strategy = if attempt == 0 { cfg.strategy } else { DecodeStrategy::Nucleus };
        let retry_cfg = DecodeConfig {
            temperature: if attempt > 0 && cfg.temperature == 0.0 { 1.0 } else { cfg.temperature },
            ..cfg.clone()
        };
        let srcs: Vec<Vec<u32>> = pending.iter().map(|&i| sources[i].clone()).collect();
        let seeds: Vec<u64> = pending.iter().map(|&i| retry_seed(requests[i].seed, attempt)).collect();
        let decoded = decode_batch(model, &srcs, strategy, &retry_cfg, &seeds)?;
        let mut still = Vec::new();
        for (&i, d) in pending.iter().zip(decoded) {
            match parse_decoded(&d, requests[i].pred_len) {
                Ok(world) => {
                    results[i] = Some(GeneratedTrajectory {
                        world,
                        text: d.text,
                        status: if attempt == 0 {
                            GenerationStatus::Ok
                        } else {
                            GenerationStatus::Retried { attempts: attempt + 1 }
                        },
                    });
                }
                Err(e) => {
                    log::debug!("generation attempt {attempt} failed: {e}");
                    last[i] = (d.text, e.to_string());
                    still.push(i);
                }
            }
        }
        pending = still;
    }
    for i in pending {
        let r = &requests[i];
        let (text, reason) = std::mem::take(&mut last[i]);
        log::warn!("falling back to constant velocity after {} attempts: {reason}", cfg.max_retries + 1);
        results[i] = Some(GeneratedTrajectory {
            world: constant_velocity(&r.past, r.pred_len),
            text,
            status: GenerationStatus::Fallback { reason },
        });
    }
    Ok(results.into_iter().map(|r| r.expect("every row resolved")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cot::SeqModelConfig;
    use candle_core::Device;

    fn tiny() -> Seq2Seq {
        let cfg = SeqModelConfig {
            d_model: 16,
            heads: 2,
            d_ff: 32,
            encoder_layers: 1,
            decoder_layers: 1,
            max_source_len: 64,
            max_target_len: 10,
            ..SeqModelConfig::toy()
        };
        Seq2Seq::new(cfg, &Device::Cpu).unwrap()
    }

    #[test]
    fn nucleus_respects_top_p() {
        let cfg = DecodeConfig {
            strategy: DecodeStrategy::Nucleus,
            top_p: 0.5,
            ..Default::default()
        };
        let logits = [0.0f32, 5.0, 4.9, -3.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let k = pick(&logits, DecodeStrategy::Nucleus, &cfg, &mut rng);
            assert!(k == 1 || k == 2);
        }
        assert_eq!(pick(&logits, DecodeStrategy::Greedy, &cfg, &mut rng), 1);
    }

    #[test]
    fn untrained_model_falls_back_with_flag() {
        let m = tiny();
        let req = GenerationRequest {
            question: "Pedestrian 0: (0.0, 0.0), (1.0, 0.0). Where will pedestrian 0 be in the next 3 frames?".into(),
            cot: "Pedestrian 0 will arrive at coordinate (4.0, 0.0) after the next 3 frames.".into(),
            past: vec![[0.0, 0.0], [1.0, 0.0]],
            pred_len: 3,
            seed: 3,
        };
        let out = generate_batch(&m, &[req.clone(), req], &DecodeConfig::default()).unwrap();
        assert!(out[0].is_fallback());
        assert_eq!(out[0].world, vec![[2.0, 0.0], [3.0, 0.0], [4.0, 0.0]]);
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn rows_are_independent_of_batch_mates() {
        let m = tiny();
        let a = m.encode_text("Pedestrian 0: (1.0, 2.0).").unwrap();
        let b = m.encode_text("Pedestrian 1: (3.5, 2.0), (4.0, 2.0).").unwrap();
        let cfg = DecodeConfig {
            strategy: DecodeStrategy::Nucleus,
            ..Default::default()
        };
        let alone = decode_batch(&m, &[a.clone()], DecodeStrategy::Nucleus, &cfg, &[7]).unwrap();
        let both = decode_batch(&m, &[b, a], DecodeStrategy::Nucleus, &cfg, &[8, 7]).unwrap();
        assert_eq!(alone[0], both[1]);
    }
}
