//! Encoder-decoder transformer over the prompt vocabulary.
//!
//! Built from primitive tensor ops only so every piece has a backward pass.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Init, Linear, Module, VarBuilder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prompt::PromptConfig;
use super::tokenizer::{Tokenizer, BOS};
use crate::error::{Error, Result};
use crate::nn::{hash_tensors, load_safetensors, save_safetensors, SeededVarMap};

pub const LLM_CHECKPOINT_FORMAT: &str = "guidecot-llm/1";

const NEG_INF: f64 = -1e9;
/// Caps on pair index, slot, pedestrian block and character position for the structure embeddings.
const STRUCTURE_CAPS: [u32; 4] = [32, 2, 7, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqScale {
    /// Roughly a million parameters; trains on a CPU in minutes.
    Toy,
    /// T5-small sized; meant for a GPU.
    Small,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    /// Top-p sampling at the configured temperature.
    Nucleus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub top_p: f64,
    pub temperature: f64,
    /// Extra attempts after a generation that does not parse. Retries always sample.
    pub max_retries: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: DecodeStrategy::Greedy,
            top_p: 0.9,
            temperature: 1.0,
            max_retries: 3,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::param("top_p", "must lie in (0, 1]"));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::param("temperature", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqModelConfig {
    pub scale: SeqScale,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Context length of the encoder input (question plus goal sentence), in tokens.
    pub max_source_len: usize,
    /// Longest answer the decoder can emit, in tokens, end marker included.
    pub max_target_len: usize,
    pub prompt: PromptConfig,
    /// Pointer head that can copy source tokens into the answer.
    #[serde(default)]
    pub copy_head: bool,
    /// Adds embeddings of each token's pair index, x/y slot, pedestrian block and
    /// position inside its number.
    #[serde(default)]
    pub structure_embeddings: bool,
    #[serde(default)]
    pub decode: DecodeConfig,
    pub seed: u64,
}

impl SeqModelConfig {
    pub fn toy() -> Self {
        Self {
            scale: SeqScale::Toy,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            encoder_layers: 2,
            decoder_layers: 2,
            max_source_len: 384,
            max_target_len: 192,
            prompt: PromptConfig::desk(),
            copy_head: true,
            structure_embeddings: true,
            decode: DecodeConfig::default(),
            seed: 0,
        }
    }

    pub fn small() -> Self {
        Self {
            scale: SeqScale::Small,
            d_model: 512,
            heads: 8,
            d_ff: 2048,
            encoder_layers: 6,
            decoder_layers: 6,
            max_source_len: 2048,
            max_target_len: 256,
            prompt: PromptConfig::default(),
            copy_head: false,
            structure_embeddings: false,
            decode: DecodeConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Architecture(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 || self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Architecture("layer counts and widths must be positive".into()));
        }
        if self.max_source_len == 0 || self.max_target_len < 2 {
            return Err(Error::Architecture("context lengths are too short".into()));
        }
        self.decode.validate()
    }

    /// Hash of everything that shapes the weights or the prompt language.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.decode = DecodeConfig::default();
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }
}

struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    fn new(d: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(d, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(d, "bias", Init::Const(0.0))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(d: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            q: candle_nn::linear(d, d, vb.pp("q"))?,
            k: candle_nn::linear(d, d, vb.pp("k"))?,
            v: candle_nn::linear(d, d, vb.pp("v"))?,
            o: candle_nn::linear(d, d, vb.pp("o"))?,
            heads,
        })
    }

    /// `(B, L, d)` -> `(B, H, L, d / H)`.
    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        Ok(x.reshape((b, l, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    fn keys_values(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.split(&self.k.forward(x)?)?, self.split(&self.v.forward(x)?)?))
    }

    /// `mask` is additive and broadcasts to `(B, H, Lq, Lk)`.
    fn attend(&self, x: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let q = self.split(&self.q.forward(x)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let p = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let y = p.matmul(v)?.transpose(1, 2)?.reshape((b, l, d))?;
        Ok(self.o.forward(&y)?)
    }
}

struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(d: usize, ff: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            up: candle_nn::linear(d, ff, vb.pp("up"))?,
            down: candle_nn::linear(ff, d, vb.pp("down"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.down.forward(&self.up.forward(x)?.gelu()?)?)
    }
}

struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let (k, v) = self.attn.keys_values(&h)?;
        let x = (x + self.attn.attend(&h, &k, &v, Some(mask))?)?;
        Ok((&x + self.ff.forward(&self.ln2.forward(&x)?)?)?)
    }
}

struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross: Attention,
    ln3: LayerNorm,
    ff: FeedForward,
}

/// Keys and values kept between decoding steps.
struct LayerCache {
    cross_k: Tensor,
    cross_v: Tensor,
    self_kv: Option<(Tensor, Tensor)>,
}

impl DecoderLayer {
    fn forward(&self, x: &Tensor, causal: &Tensor, mem_kv: (&Tensor, &Tensor), src_mask: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let (k, v) = self.self_attn.keys_values(&h)?;
        let x = (x + self.self_attn.attend(&h, &k, &v, Some(causal))?)?;
        let h = self.ln2.forward(&x)?;
        let x = (&x + self.cross.attend(&h, mem_kv.0, mem_kv.1, Some(src_mask))?)?;
        Ok((&x + self.ff.forward(&self.ln3.forward(&x)?)?)?)
    }

    fn step(&self, x: &Tensor, cache: &mut LayerCache, src_mask: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let (k, v) = self.self_attn.keys_values(&h)?;
        let (k, v) = match cache.self_kv.take() {
            Some((pk, pv)) => (Tensor::cat(&[&pk, &k], 2)?, Tensor::cat(&[&pv, &v], 2)?),
            None => (k, v),
        };
        let x = (x + self.self_attn.attend(&h, &k, &v, None)?)?;
        cache.self_kv = Some((k, v));
        let h = self.ln2.forward(&x)?;
        let x = (&x + self.cross.attend(&h, &cache.cross_k, &cache.cross_v, Some(src_mask))?)?;
        Ok((&x + self.ff.forward(&self.ln3.forward(&x)?)?)?)
    }
}

/// Encoder output for a batch, plus what the copy head needs.
pub struct Memory {
    states: Tensor,
    /// Additive `(B, 1, 1, Ls)` mask hiding padded source positions.
    mask: Tensor,
    /// `(B, Ls, V)` one-hot source tokens, present with the copy head.
    onehot: Option<Tensor>,
    copy_keys: Option<Tensor>,
}

/// Encoder output and per-layer caches for incremental decoding of a batch.
pub struct DecodeState {
    memory: Memory,
    /// Tokens fed so far, per row.
    history: Vec<Vec<u32>>,
    layers: Vec<LayerCache>,
    pos: usize,
}

impl DecodeState {
    /// Number of tokens already fed to the decoder.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Pointer head: mixes the vocabulary distribution with attention over source tokens.
struct CopyHead {
    q: Linear,
    k: Linear,
    gate: Linear,
}

pub struct Seq2Seq {
    cfg: SeqModelConfig,
    tokenizer: Tokenizer,
    vars: SeededVarMap,
    embed: Tensor,
    pos_src: Tensor,
    /// Source positions counted from the end, so the goal sentence sits at fixed offsets.
    pos_src_rev: Tensor,
    pos_tgt: Tensor,
    encoder: Vec<EncoderLayer>,
    enc_ln: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_ln: LayerNorm,
    copy: Option<CopyHead>,
    /// Pair, slot, block and character tables.
    structure: Option<[Tensor; 4]>,
    device: Device,
    dtype: DType,
}

impl Seq2Seq {
    pub fn new(cfg: SeqModelConfig, device: &Device) -> Result<Self> {
        Self::with_dtype(cfg, Tokenizer::default(), DType::F32, device)
    }

    pub fn with_dtype(cfg: SeqModelConfig, tokenizer: Tokenizer, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let vars = SeededVarMap::new(cfg.seed);
        let vb = vars.var_builder(dtype, device);
        let d = cfg.d_model;
        let small = Init::Randn {
            mean: 0.0,
            stdev: 0.02,
        };
        let embed = vb.get_with_hints((tokenizer.vocab_size(), d), "embed", small)?;
        let pos_src = vb.get_with_hints((cfg.max_source_len, d), "pos_src", small)?;
        let pos_src_rev = vb.get_with_hints((cfg.max_source_len, d), "pos_src_rev", small)?;
        let pos_tgt = vb.get_with_hints((cfg.max_target_len, d), "pos_tgt", small)?;
        let encoder = (0..cfg.encoder_layers)
            .map(|l| {
                let vb = vb.pp(format!("enc.{l}"));
                Ok(EncoderLayer {
                    ln1: LayerNorm::new(d, vb.pp("ln1"))?,
                    attn: Attention::new(d, cfg.heads, vb.pp("attn"))?,
                    ln2: LayerNorm::new(d, vb.pp("ln2"))?,
                    ff: FeedForward::new(d, cfg.d_ff, vb.pp("ff"))?,
                })
            })
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.decoder_layers)
            .map(|l| {
                let vb = vb.pp(format!("dec.{l}"));
                Ok(DecoderLayer {
                    ln1: LayerNorm::new(d, vb.pp("ln1"))?,
                    self_attn: Attention::new(d, cfg.heads, vb.pp("self"))?,
                    ln2: LayerNorm::new(d, vb.pp("ln2"))?,
                    cross: Attention::new(d, cfg.heads, vb.pp("cross"))?,
                    ln3: LayerNorm::new(d, vb.pp("ln3"))?,
                    ff: FeedForward::new(d, cfg.d_ff, vb.pp("ff"))?,
                })
            })
            .collect::<Result<_>>()?;
        let copy = if cfg.copy_head {
            let vb = vb.pp("copy");
            Some(CopyHead {
                q: candle_nn::linear(d, d, vb.pp("q"))?,
                k: candle_nn::linear(d, d, vb.pp("k"))?,
                gate: candle_nn::linear(2 * d, 1, vb.pp("gate"))?,
            })
        } else {
            None
        };
        let structure = if cfg.structure_embeddings {
            let vb = vb.pp("structure");
            Some([
                vb.get_with_hints((STRUCTURE_CAPS[0] as usize + 1, d), "pair", small)?,
                vb.get_with_hints((STRUCTURE_CAPS[1] as usize + 1, d), "slot", small)?,
                vb.get_with_hints((STRUCTURE_CAPS[2] as usize + 1, d), "block", small)?,
                vb.get_with_hints((STRUCTURE_CAPS[3] as usize + 1, d), "char", small)?,
            ])
        } else {
            None
        };
        Ok(Self {
            structure,
            enc_ln: LayerNorm::new(d, vb.pp("enc_ln"))?,
            dec_ln: LayerNorm::new(d, vb.pp("dec_ln"))?,
            cfg,
            tokenizer,
            vars,
            embed,
            pos_src,
            pos_src_rev,
            pos_tgt,
            encoder,
            decoder,
            copy,
            device: device.clone(),
            dtype,
        })
    }

    pub fn config(&self) -> &SeqModelConfig {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
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

    pub fn num_params(&self) -> usize {
        self.vars.num_params()
    }

    /// Hash of the weights, vocabulary and configuration.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.cfg.hash());
        h.update(serde_json::to_vec(&self.tokenizer)?);
        h.update(hash_tensors(&self.vars.tensors())?);
        Ok(hex::encode(h.finalize()))
    }

    fn lookup(&self, table: &Tensor, idx: Vec<u32>, b: usize, l: usize) -> Result<Tensor> {
        let idx = Tensor::from_vec(idx, b * l, &self.device)?;
        Ok(table.index_select(&idx, 0)?.reshape((b, l, self.cfg.d_model))?)
    }

    /// Structure embeddings `(B, L, d)` for token rows of equal length `l`, reading
    /// only the first `lens[r]` tokens of row `r`; `None` when disabled.
    fn structure_embedding(&self, rows: &[&[u32]], lens: &[usize], l: usize) -> Result<Option<Tensor>> {
        let Some(tables) = &self.structure else {
            return Ok(None);
        };
        let b = rows.len();
        let mut idx = [vec![0u32; b * l], vec![0u32; b * l], vec![0u32; b * l], vec![0u32; b * l]];
        for (r, row) in rows.iter().enumerate() {
            let st = self.tokenizer.structure(&row[..lens[r]], STRUCTURE_CAPS);
            let skip = lens[r].saturating_sub(l);
            for (k, s) in st.iter().skip(skip).enumerate() {
                for f in 0..4 {
                    idx[f][r * l + k] = s[f];
                }
            }
        }
        let mut out: Option<Tensor> = None;
        for (table, ids) in tables.iter().zip(idx) {
            let e = self.lookup(table, ids, b, l)?;
            out = Some(match out {
                Some(o) => (o + e)?,
                None => e,
            });
        }
        Ok(out)
    }

    /// `src` and `valid` are `(B, Ls)`; `valid` is 1 on real tokens, which come first in each row.
    pub fn encode(&self, src: &Tensor, valid: &Tensor) -> Result<Memory> {
        let (b, ls) = src.dims2()?;
        if ls > self.cfg.max_source_len {
            return Err(Error::Input(format!(
                "prompt of {ls} tokens exceeds the context length {}",
                self.cfg.max_source_len
            )));
        }
        let valid_rows: Vec<Vec<u32>> = valid.to_dtype(DType::U32)?.to_vec2()?;
        let ids: Vec<u32> = src.flatten_all()?.to_vec1()?;
        let fwd: Vec<u32> = (0..b).flat_map(|_| 0..ls as u32).collect();
        let rev: Vec<u32> = valid_rows
            .iter()
            .flat_map(|row| {
                let n = row.iter().sum::<u32>();
                (0..ls as u32).map(move |k| n.saturating_sub(k + 1))
            })
            .collect();
        let mut x = (self.lookup(&self.embed, ids.clone(), b, ls)? + self.lookup(&self.pos_src, fwd, b, ls)?)?;
        x = (x + self.lookup(&self.pos_src_rev, rev, b, ls)?)?;
        let lens: Vec<usize> = valid_rows.iter().map(|r| r.iter().sum::<u32>() as usize).collect();
        let rows: Vec<&[u32]> = ids.chunks(ls).collect();
        if let Some(st) = self.structure_embedding(&rows, &lens, ls)? {
            x = (x + st)?;
        }
        let mask = ((valid.to_dtype(self.dtype)? - 1.0)? * -NEG_INF)?.reshape((b, 1, 1, ls))?;
        for layer in &self.encoder {
            x = layer.forward(&x, &mask)?;
        }
        let states = self.enc_ln.forward(&x)?;
        let (onehot, copy_keys) = match &self.copy {
            Some(c) => {
                let v = self.tokenizer.vocab_size();
                let mut oh = vec![0f32; b * ls * v];
                for (k, &t) in ids.iter().enumerate() {
                    oh[k * v + t as usize] = 1.0;
                }
                let oh = Tensor::from_vec(oh, (b, ls, v), &self.device)?.to_dtype(self.dtype)?;
                (Some(oh), Some(c.k.forward(&states)?))
            }
            None => (None, None),
        };
        Ok(Memory {
            states,
            mask,
            onehot,
            copy_keys,
        })
    }

    fn causal_mask(&self, l: usize) -> Result<Tensor> {
        let v: Vec<f32> = (0..l)
            .flat_map(|i| (0..l).map(move |j| if j > i { NEG_INF as f32 } else { 0.0 }))
            .collect();
        Ok(Tensor::from_vec(v, (1, 1, l, l), &self.device)?.to_dtype(self.dtype)?)
    }

    fn embed_target(&self, ids: &Tensor, offset: usize) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        let tok = self.embed.index_select(&ids.flatten_all()?, 0)?.reshape((b, l, self.cfg.d_model))?;
        Ok(tok.broadcast_add(&self.pos_tgt.narrow(0, offset, l)?.unsqueeze(0)?)?)
    }

    /// Teacher-forced decoder states `(B, Lt, d)` for decoder inputs `tgt_in`.
    pub fn decode(&self, tgt_in: &Tensor, memory: &Memory) -> Result<Tensor> {
        let lt = tgt_in.dim(1)?;
        if lt > self.cfg.max_target_len {
            return Err(Error::Input(format!(
                "answer of {lt} tokens exceeds the decoder length {}",
                self.cfg.max_target_len
            )));
        }
        let causal = self.causal_mask(lt)?;
        let mut x = self.embed_target(tgt_in, 0)?;
        let flat: Vec<u32> = tgt_in.flatten_all()?.to_vec1()?;
        let rows: Vec<&[u32]> = flat.chunks(lt).collect();
        if let Some(st) = self.structure_embedding(&rows, &vec![lt; rows.len()], lt)? {
            x = (x + st)?;
        }
        for layer in &self.decoder {
            let (k, v) = layer.cross.keys_values(&memory.states)?;
            x = layer.forward(&x, &causal, (&k, &v), &memory.mask)?;
        }
        self.dec_ln.forward(&x)
    }

    /// Log-probabilities `(B, L, V)` of the next token given decoder states `(B, L, d)`.
    /// The vocabulary projection is tied to the embedding.
    pub fn log_probs(&self, hidden: &Tensor, memory: &Memory) -> Result<Tensor> {
        let (b, l, d) = hidden.dims3()?;
        let v = self.tokenizer.vocab_size();
        let logits = hidden.reshape((b * l, d))?.matmul(&self.embed.t()?)?.reshape((b, l, v))?;
        let (Some(c), Some(onehot), Some(keys)) = (&self.copy, &memory.onehot, &memory.copy_keys) else {
            return Ok(candle_nn::ops::log_softmax(&logits, D::Minus1)?);
        };
        let vocab = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let scores = (c.q.forward(hidden)?.matmul(&keys.t()?)? / (d as f64).sqrt())?
            .broadcast_add(&memory.mask.squeeze(1)?)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = attn.matmul(&memory.states)?;
        let g = candle_nn::ops::sigmoid(&c.gate.forward(&Tensor::cat(&[hidden, &ctx], D::Minus1)?)?)?;
        let copied = attn.matmul(onehot)?;
        let p = (vocab.broadcast_mul(&g)? + copied.broadcast_mul(&(1.0 - g)?)?)?;
        Ok((p + 1e-9)?.log()?)
    }

    /// Runs the encoder and primes the caches for [`Self::step`].
    pub fn start(&self, src: &Tensor, valid: &Tensor) -> Result<DecodeState> {
        let memory = self.encode(src, valid)?;
        let layers = self
            .decoder
            .iter()
            .map(|l| {
                let (cross_k, cross_v) = l.cross.keys_values(&memory.states)?;
                Ok(LayerCache {
                    cross_k,
                    cross_v,
                    self_kv: None,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DecodeState {
            history: vec![Vec::new(); src.dim(0)?],
            memory,
            layers,
            pos: 0,
        })
    }

    /// Feeds one token per row and returns next-token log-probabilities `(B, V)`.
    pub fn step(&self, state: &mut DecodeState, tokens: &[u32]) -> Result<Tensor> {
        if state.pos >= self.cfg.max_target_len {
            return Err(Error::Input("decoder length exhausted".into()));
        }
        let ids = Tensor::from_vec(tokens.to_vec(), (tokens.len(), 1), &self.device)?;
        let mut x = self.embed_target(&ids, state.pos)?;
        for (h, &t) in state.history.iter_mut().zip(tokens) {
            h.push(t);
        }
        let rows: Vec<&[u32]> = state.history.iter().map(Vec::as_slice).collect();
        let lens: Vec<usize> = rows.iter().map(|r| r.len()).collect();
        if let Some(st) = self.structure_embedding(&rows, &lens, 1)? {
            x = (x + st)?;
        }
        for (layer, cache) in self.decoder.iter().zip(state.layers.iter_mut()) {
            x = layer.step(&x, cache, &state.memory.mask)?;
        }
        state.pos += 1;
        let h = self.dec_ln.forward(&x)?;
        Ok(self.log_probs(&h, &state.memory)?.squeeze(1)?)
    }

    /// Token ids of the encoder input; fails on symbols outside the vocabulary.
    pub fn encode_text(&self, text: &str) -> Result<Vec<u32>> {
        Ok(self.tokenizer.tokenize(text)?.ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("format".into(), LLM_CHECKPOINT_FORMAT.into());
        meta.insert("config".into(), serde_json::to_string(&self.cfg)?);
        meta.insert("config_hash".into(), self.cfg.hash());
        meta.insert("vocabulary".into(), serde_json::to_string(&self.tokenizer)?);
        let tensors: BTreeMap<String, Tensor> = self.vars.tensors();
        save_safetensors(path, &tensors, meta)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let (tensors, meta) = load_safetensors(path, device)?;
        if meta.get("format").map(String::as_str) != Some(LLM_CHECKPOINT_FORMAT) {
            return Err(Error::checkpoint(path, "not a sequence-model checkpoint"));
        }
        let field = |k: &str| meta.get(k).ok_or_else(|| Error::checkpoint(path, format!("missing {k}")));
        let cfg: SeqModelConfig = serde_json::from_str(field("config")?)?;
        let tokenizer: Tokenizer = serde_json::from_str(field("vocabulary")?)?;
        let model = Self::with_dtype(cfg, tokenizer, DType::F32, device)?;
        model
            .vars
            .assign(&tensors)
            .map_err(|e| Error::checkpoint(path, e.to_string()))?;
        Ok(model)
    }
}

/// Decoder input for an answer: BOS followed by the answer tokens.
pub fn decoder_input(answer: &[u32]) -> Vec<u32> {
    std::iter::once(BOS).chain(answer.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SeqModelConfig {
        SeqModelConfig {
            d_model: 16,
            heads: 2,
            d_ff: 32,
            encoder_layers: 1,
            decoder_layers: 2,
            max_source_len: 24,
            max_target_len: 12,
            ..SeqModelConfig::toy()
        }
    }

    fn ids(v: &[u32], dev: &Device) -> Tensor {
        Tensor::from_vec(v.to_vec(), (1, v.len()), dev).unwrap()
    }

    #[test]
    fn config_checks() {
        let mut c = tiny();
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::Architecture(_))));
        assert!(SeqModelConfig::small().validate().is_ok());
    }

    #[test]
    fn toy_parameter_count() {
        let m = Seq2Seq::new(SeqModelConfig::toy(), &Device::Cpu).unwrap();
        let n = m.num_params();
        assert!((200_000..600_000).contains(&n), "{n}");
    }

    #[test]
    fn cached_steps_match_teacher_forcing() {
        let dev = Device::Cpu;
        for copy_head in [false, true] {
            let m = Seq2Seq::new(
                SeqModelConfig {
                    copy_head,
                    structure_embeddings: copy_head,
                    ..tiny()
                },
                &dev,
            )
            .unwrap();
            let src = ids(&[5, 9, 20, 31, 7], &dev);
            let valid = Tensor::ones((1, 5), DType::U32, &dev).unwrap();
            let tgt = [BOS, 12, 13, 20, 25, 17];
            let memory = m.encode(&src, &valid).unwrap();
            let full = m.log_probs(&m.decode(&ids(&tgt, &dev), &memory).unwrap(), &memory).unwrap();
            let mut state = m.start(&src, &valid).unwrap();
            for (t, &tok) in tgt.iter().enumerate() {
                let step = m.step(&mut state, &[tok]).unwrap();
                let a: Vec<f32> = step.flatten_all().unwrap().to_vec1().unwrap();
                let b: Vec<f32> = full.narrow(1, t, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
                let total: f32 = a.iter().map(|x| x.exp()).sum();
                assert!((total - 1.0).abs() < 1e-4);
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() < 1e-4, "step {t}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn padding_does_not_leak() {
        let dev = Device::Cpu;
        let m = Seq2Seq::new(tiny(), &dev).unwrap();
        let tgt = ids(&[BOS, 12], &dev);
        let run = |src: Vec<u32>, valid: Vec<u32>| {
            let n = valid.len();
            let valid = Tensor::from_vec(valid, (1, n), &dev).unwrap();
            let mem = m.encode(&ids(&src, &dev), &valid).unwrap();
            let v: Vec<f32> = m
                .log_probs(&m.decode(&tgt, &mem).unwrap(), &mem)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap();
            v
        };
        let a = run(vec![5, 9, 20], vec![1, 1, 1]);
        let b = run(vec![5, 9, 20, 0, 0], vec![1, 1, 1, 0, 0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn copy_head_can_point_at_a_source_token() {
        let dev = Device::Cpu;
        let m = Seq2Seq::new(tiny(), &dev).unwrap();
        // Token 60 appears only in the source; without the copy head it would get
        // about 1/V of the mass.
        let src = ids(&[60, 60, 60], &dev);
        let valid = Tensor::ones((1, 3), DType::U32, &dev).unwrap();
        let mut state = m.start(&src, &valid).unwrap();
        let lp: Vec<f32> = m.step(&mut state, &[BOS]).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(lp[60].exp() > 0.2, "{}", lp[60].exp());
    }

    #[test]
    fn context_length_is_enforced() {
        let dev = Device::Cpu;
        let m = Seq2Seq::new(tiny(), &dev).unwrap();
        let src = Tensor::zeros((1, 25), DType::U32, &dev).unwrap();
        let valid = Tensor::ones((1, 25), DType::U32, &dev).unwrap();
        assert!(matches!(m.encode(&src, &valid), Err(Error::Input(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dev = Device::Cpu;
        let m = Seq2Seq::new(tiny(), &dev).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("llm.safetensors");
        m.save(&p).unwrap();
        let back = Seq2Seq::load(&p, &dev).unwrap();
        assert_eq!(back.hash().unwrap(), m.hash().unwrap());
        assert_eq!(back.tokenizer(), m.tokenizer());
    }
}
