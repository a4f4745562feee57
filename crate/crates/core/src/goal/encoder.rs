//! Visual encoders producing a feature pyramid from the visual condition.

use std::collections::HashMap;
use std::path::PathBuf;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{conv2d, conv2d_no_bias, Conv2d, Conv2dConfig, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::SeededVarMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderBackend {
    ClipResnet50,
    ImagenetResnet50,
    RemoteClip,
    ToyCnn,
}

impl EncoderBackend {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ClipResnet50 => "clip_resnet50",
            Self::ImagenetResnet50 => "imagenet_resnet50",
            Self::RemoteClip => "remote_clip",
            Self::ToyCnn => "toy_cnn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backend: EncoderBackend,
    /// Safetensors file with the pretrained weights. Unused by `toy_cnn`.
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
    pub frozen: bool,
    /// Indices of the pyramid stages handed to the goal module.
    pub feature_levels: Vec<usize>,
    /// Side length the visual condition is resized to.
    pub input_size: usize,
    /// Channels of the toy stages; ignored by the ResNet backends.
    #[serde(default)]
    pub toy_channels: Vec<usize>,
    /// Seed of the toy encoder's fixed weights.
    #[serde(default)]
    pub toy_seed: u64,
}

impl EncoderConfig {
    pub fn toy(input_size: usize) -> Self {
        Self {
            backend: EncoderBackend::ToyCnn,
            weights_path: None,
            frozen: true,
            feature_levels: vec![0, 1, 2],
            input_size,
            toy_channels: vec![8, 16, 16],
            toy_seed: 1,
        }
    }

    pub fn resnet(backend: EncoderBackend, weights_path: Option<PathBuf>) -> Self {
        Self {
            backend,
            weights_path,
            frozen: true,
            feature_levels: vec![0, 1, 2, 3],
            input_size: 224,
            toy_channels: Vec::new(),
            toy_seed: 0,
        }
    }

    /// `(channels, downsampling factor)` of every stage the backend has.
    pub fn all_stages(&self) -> Vec<(usize, usize)> {
        match self.backend {
            EncoderBackend::ToyCnn => self
                .toy_channels
                .iter()
                .enumerate()
                .map(|(k, &c)| (c, 1 << (k + 1)))
                .collect(),
            _ => vec![(256, 4), (512, 8), (1024, 16), (2048, 32)],
        }
    }

    /// `(channels, side length)` of the exposed stages.
    pub fn stage_shapes(&self) -> Vec<(usize, usize)> {
        let all = self.all_stages();
        self.feature_levels
            .iter()
            .map(|&k| (all[k].0, self.input_size / all[k].1))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.all_stages();
        if all.is_empty() {
            return Err(Error::param("toy_channels", "the toy encoder needs at least one stage"));
        }
        if self.feature_levels.is_empty() {
            return Err(Error::param("feature_levels", "expose at least one stage"));
        }
        if self.feature_levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param(
                "feature_levels",
                "stages must be listed with strictly decreasing resolution",
            ));
        }
        if let Some(&k) = self.feature_levels.iter().find(|&&k| k >= all.len()) {
            return Err(Error::param("feature_levels", format!("stage {k} does not exist")));
        }
        let deepest = all[*self.feature_levels.last().expect("non-empty")].1;
        if self.input_size == 0 || self.input_size % deepest != 0 {
            return Err(Error::param(
                "input_size",
                format!("{} is not divisible by the deepest stride {deepest}", self.input_size),
            ));
        }
        Ok(())
    }
}

struct BatchNorm {
    weight: Tensor,
    bias: Tensor,
    mean: Tensor,
    var: Tensor,
}

impl BatchNorm {
    fn new(c: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(c, "weight", candle_nn::Init::Const(1.0))?,
            bias: vb.get_with_hints(c, "bias", candle_nn::Init::Const(0.0))?,
            mean: vb.get_with_hints(c, "running_mean", candle_nn::Init::Const(0.0))?,
            var: vb.get_with_hints(c, "running_var", candle_nn::Init::Const(1.0))?,
        })
    }

    /// Inference-mode normalization with the running statistics.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.weight.dim(0)?;
        let scale = (&self.weight / (&self.var + 1e-5)?.sqrt()?)?;
        let shift = (&self.bias - (&self.mean * &scale)?)?;
        let y = x.broadcast_mul(&scale.reshape((1, c, 1, 1))?)?;
        Ok(y.broadcast_add(&shift.reshape((1, c, 1, 1))?)?)
    }
}

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?)
    }
}

fn conv_bn(
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    conv_vb: VarBuilder,
    bn_vb: VarBuilder,
) -> Result<ConvBn> {
    let cfg = Conv2dConfig {
        padding: k / 2,
        stride,
        ..Default::default()
    };
    Ok(ConvBn {
        conv: conv2d_no_bias(cin, cout, k, cfg, conv_vb)?,
        bn: BatchNorm::new(cout, bn_vb)?,
    })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ResNetFlavor {
    /// torchvision layout: 7x7 stem, max pool, strided 3x3 convs.
    Torchvision,
    /// CLIP's modified layout: 3-conv stem, average pools instead of strides.
    Clip,
}

struct Bottleneck {
    conv1: ConvBn,
    conv2: ConvBn,
    conv3: ConvBn,
    downsample: Option<ConvBn>,
    stride: usize,
    flavor: ResNetFlavor,
}

impl Bottleneck {
    fn new(cin: usize, planes: usize, stride: usize, flavor: ResNetFlavor, vb: VarBuilder) -> Result<Self> {
        let s2 = if flavor == ResNetFlavor::Torchvision { stride } else { 1 };
        let conv1 = conv_bn(cin, planes, 1, 1, vb.pp("conv1"), vb.pp("bn1"))?;
        let conv2 = conv_bn(planes, planes, 3, s2, vb.pp("conv2"), vb.pp("bn2"))?;
        let conv3 = conv_bn(planes, planes * 4, 1, 1, vb.pp("conv3"), vb.pp("bn3"))?;
        let downsample = if stride != 1 || cin != planes * 4 {
            let d = vb.pp("downsample");
            Some(match flavor {
                ResNetFlavor::Torchvision => conv_bn(cin, planes * 4, 1, stride, d.pp("0"), d.pp("1"))?,
                ResNetFlavor::Clip => conv_bn(cin, planes * 4, 1, 1, d.pp("1"), d.pp("2"))?,
            })
        } else {
            None
        };
        Ok(Self {
            conv1,
            conv2,
            conv3,
            downsample,
            stride,
            flavor,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.conv1.forward(x)?.relu()?;
        y = self.conv2.forward(&y)?.relu()?;
        if self.flavor == ResNetFlavor::Clip && self.stride > 1 {
            y = y.avg_pool2d(self.stride)?;
        }
        y = self.conv3.forward(&y)?;
        let identity = match &self.downsample {
            Some(d) => {
                let x = if self.flavor == ResNetFlavor::Clip && self.stride > 1 {
                    x.avg_pool2d(self.stride)?
                } else {
                    x.clone()
                };
                d.forward(&x)?
            }
            None => x.clone(),
        };
        Ok((y + identity)?.relu()?)
    }
}

struct ResNet50 {
    flavor: ResNetFlavor,
    stem: Vec<ConvBn>,
    layers: Vec<Vec<Bottleneck>>,
}

impl ResNet50 {
    fn new(flavor: ResNetFlavor, vb: VarBuilder) -> Result<Self> {
        let stem = match flavor {
            ResNetFlavor::Torchvision => vec![conv_bn(3, 64, 7, 2, vb.pp("conv1"), vb.pp("bn1"))?],
            ResNetFlavor::Clip => vec![
                conv_bn(3, 32, 3, 2, vb.pp("conv1"), vb.pp("bn1"))?,
                conv_bn(32, 32, 3, 1, vb.pp("conv2"), vb.pp("bn2"))?,
                conv_bn(32, 64, 3, 1, vb.pp("conv3"), vb.pp("bn3"))?,
            ],
        };
        let mut layers = Vec::new();
        let mut cin = 64;
        for (li, (&blocks, &planes)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
            let stride = if li == 0 { 1 } else { 2 };
            let lvb = vb.pp(format!("layer{}", li + 1));
            let mut layer = Vec::new();
            for b in 0..blocks {
                layer.push(Bottleneck::new(cin, planes, if b == 0 { stride } else { 1 }, flavor, lvb.pp(b.to_string()))?);
                cin = planes * 4;
            }
            layers.push(layer);
        }
        Ok(Self { flavor, stem, layers })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut y = x.clone();
        for s in &self.stem {
            y = s.forward(&y)?.relu()?;
        }
        y = match self.flavor {
            // Values are >= 0 after the ReLU, so zero padding equals -inf padding.
            ResNetFlavor::Torchvision => y
                .pad_with_zeros(2, 1, 1)?
                .pad_with_zeros(3, 1, 1)?
                .max_pool2d_with_stride(3, 2)?,
            ResNetFlavor::Clip => y.avg_pool2d(2)?,
        };
        let mut out = Vec::new();
        for layer in &self.layers {
            for block in layer {
                y = block.forward(&y)?;
            }
            out.push(y.clone());
        }
        Ok(out)
    }
}

struct ToyCnn {
    stages: Vec<Conv2d>,
}

impl ToyCnn {
    fn new(channels: &[usize], vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let mut cin = 3;
        let mut stages = Vec::new();
        for (k, &c) in channels.iter().enumerate() {
            stages.push(conv2d(cin, c, 3, cfg, vb.pp(format!("stage{k}")))?);
            cin = c;
        }
        Ok(Self { stages })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut y = (x - 0.5)?;
        let mut out = Vec::new();
        for conv in &self.stages {
            y = candle_nn::ops::silu(&conv.forward(&y)?)?.avg_pool2d(2)?;
            out.push(y.clone());
        }
        Ok(out)
    }
}

enum Backbone {
    Toy(ToyCnn),
    ResNet(ResNet50),
}

/// The visual encoder. Its variables live under `encoder.` in the shared var map.
pub struct VisualEncoder {
    cfg: EncoderConfig,
    backbone: Backbone,
    norm: Option<(Tensor, Tensor)>,
}

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

impl VisualEncoder {
    /// Builds the encoder, loading pretrained weights for the ResNet backends.
    pub fn new(cfg: &EncoderConfig, vars: &SeededVarMap, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        if cfg.backend != EncoderBackend::ToyCnn {
            let path = cfg.weights_path.as_ref().ok_or_else(|| Error::WeightsLoad {
                backend: cfg.backend.as_str().into(),
                msg: "no weights_path configured".into(),
            })?;
            if !path.exists() {
                return Err(Error::WeightsLoad {
                    backend: cfg.backend.as_str().into(),
                    msg: format!("{} does not exist", path.display()),
                });
            }
        }
        let enc = Self::with_initial_weights(cfg, vars, dtype, device)?;
        if let Some(path) = &cfg.weights_path {
            if cfg.backend != EncoderBackend::ToyCnn {
                enc.load_pretrained(path, vars, device)?;
            }
        }
        Ok(enc)
    }

    /// Builds the architecture with seeded weights and no pretrained checkpoint.
    /// Useful for shape checks of the ResNet backends.
    pub fn with_initial_weights(
        cfg: &EncoderConfig,
        vars: &SeededVarMap,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        let vb = vars.var_builder(dtype, device).pp("encoder");
        let (backbone, norm) = match cfg.backend {
            EncoderBackend::ToyCnn => (Backbone::Toy(ToyCnn::new(&cfg.toy_channels, vb)?), None),
            EncoderBackend::ImagenetResnet50 => (
                Backbone::ResNet(ResNet50::new(ResNetFlavor::Torchvision, vb)?),
                Some((IMAGENET_MEAN, IMAGENET_STD)),
            ),
            EncoderBackend::ClipResnet50 | EncoderBackend::RemoteClip => (
                Backbone::ResNet(ResNet50::new(ResNetFlavor::Clip, vb)?),
                Some((CLIP_MEAN, CLIP_STD)),
            ),
        };
        let norm = norm
            .map(|(m, s)| -> Result<_> {
                Ok((
                    Tensor::new(&m, device)?.reshape((1, 3, 1, 1))?.to_dtype(dtype)?,
                    Tensor::new(&s, device)?.reshape((1, 3, 1, 1))?.to_dtype(dtype)?,
                ))
            })
            .transpose()?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            norm,
        })
    }

    fn load_pretrained(&self, path: &std::path::Path, vars: &SeededVarMap, device: &Device) -> Result<()> {
        let backend = self.cfg.backend.as_str();
        let err = |msg: String| Error::WeightsLoad {
            backend: backend.into(),
            msg,
        };
        let raw = candle_core::safetensors::load(path, device)
            .map_err(|e| err(format!("{}: {e}", path.display())))?;
        // CLIP checkpoints prefix the image tower with `visual.`.
        let strip = raw.keys().any(|k| k.starts_with("visual."));
        let mut mapped: HashMap<String, Tensor> = HashMap::new();
        for (k, t) in raw {
            let key = if strip {
                match k.strip_prefix("visual.") {
                    Some(s) => s.to_string(),
                    None => continue,
                }
            } else {
                k
            };
            mapped.insert(format!("encoder.{key}"), t);
        }
        for (name, var) in vars.vars() {
            if !name.starts_with("encoder.") {
                continue;
            }
            let t = mapped
                .get(&name)
                .ok_or_else(|| err(format!("missing tensor {}", &name["encoder.".len()..])))?;
            if t.dims() != var.dims() {
                return Err(err(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    &name["encoder.".len()..],
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Features of the exposed stages for a `(B, 3, S, S)` batch in `[0, 1]`.
    /// A frozen encoder returns detached tensors.
    pub fn encode(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != self.cfg.input_size || w != self.cfg.input_size {
            return Err(Error::Dimension(format!(
                "encoder expects (B, 3, {s}, {s}), got {:?}",
                x.dims(),
                s = self.cfg.input_size
            )));
        }
        let x = match &self.norm {
            Some((m, s)) => x.broadcast_sub(m)?.broadcast_div(s)?,
            None => x.clone(),
        };
        let all = match &self.backbone {
            Backbone::Toy(t) => t.forward(&x)?,
            Backbone::ResNet(r) => r.forward(&x)?,
        };
        self.cfg
            .feature_levels
            .iter()
            .map(|&k| {
                let t = all[k].clone();
                Ok(if self.cfg.frozen { t.detach() } else { t })
            })
            .collect()
    }

    /// Names of the variables an optimizer may update when unfrozen.
    pub fn is_trainable_name(name: &str) -> bool {
        name.starts_with("encoder.") && !name.ends_with("running_mean") && !name.ends_with("running_var")
    }
}
