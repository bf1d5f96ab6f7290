//! Regression network: a convolutional backbone, global average pooling and
//! a two-layer fully connected head ending in one scalar.
//!
//! Layers are written directly against `candle` tensors. Parameters live in a
//! name-keyed map of [`Var`]s using torchvision's naming scheme for ResNet-50,
//! so torchvision-exported weights load without renaming. Batch-norm running
//! statistics are plain buffers updated only by [`Model::forward_train`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensorfile::{self, HostTensor, TensorMap};

pub const SCORE_MIN: f64 = 0.0;
pub const SCORE_MAX: f64 = 63.0;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Clamps a raw regression output to the BDI-II range.
pub fn clamp_score(raw: f64) -> Result<f64> {
    if !raw.is_finite() {
        return Err(Error::Numeric(format!("non-finite score {raw}")));
    }
    Ok(raw.clamp(SCORE_MIN, SCORE_MAX))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[default]
    Resnet50,
    TinyTestBackbone,
}

impl Backbone {
    pub fn feature_dim(self) -> usize {
        match self {
            Backbone::Resnet50 => 2048,
            Backbone::TinyTestBackbone => 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainedSource {
    #[default]
    FaceRecognitionWeights,
    GenericImagenet,
    Random,
}

impl PretrainedSource {
    /// Channel mean/std the source's weights were trained with.
    pub fn default_normalization(self) -> Normalization {
        match self {
            // face-recognition backbones are usually trained on (x - 0.5) / 0.5
            PretrainedSource::FaceRecognitionWeights => Normalization {
                mean: [0.5; 3],
                std: [0.5; 3],
            },
            PretrainedSource::GenericImagenet | PretrainedSource::Random => Normalization::IMAGENET,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub pretrained_source: PretrainedSource,
    /// Safetensors file with backbone weights; required unless the source is `random`.
    pub pretrained_path: Option<PathBuf>,
    pub head_widths: Vec<usize>,
    pub input_size: usize,
    pub normalization: Normalization,
    pub precision: Precision,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let source = PretrainedSource::default();
        Self {
            backbone: Backbone::Resnet50,
            pretrained_source: source,
            pretrained_path: None,
            head_widths: vec![512, 128],
            input_size: 224,
            normalization: source.default_normalization(),
            precision: Precision::F32,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Randomly initialised tiny backbone, for tests and desk-scale runs.
    pub fn tiny(input_size: usize, seed: u64) -> Self {
        Self {
            backbone: Backbone::TinyTestBackbone,
            pretrained_source: PretrainedSource::Random,
            normalization: Normalization::IMAGENET,
            input_size,
            init_seed: seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_widths.len() != 2 || self.head_widths.contains(&0) {
            return Err(Error::Config(format!(
                "head_widths must be two positive integers, got {:?}",
                self.head_widths
            )));
        }
        let min = match self.backbone {
            Backbone::Resnet50 => 32,
            Backbone::TinyTestBackbone => 8,
        };
        if self.input_size < min {
            return Err(Error::Config(format!(
                "input_size {} is below the backbone minimum {min}",
                self.input_size
            )));
        }
        if self.normalization.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }
}

/// Shapes of every parameter and buffer, in build order.
struct Layout {
    params: Vec<(String, Vec<usize>, Init)>,
    buffers: Vec<(String, Vec<usize>, f64)>,
}

#[derive(Clone, Copy)]
enum Init {
    KaimingFanOut,
    Const(f64),
    /// Uniform in `±1/sqrt(fan_in)`.
    FanInUniform(usize),
}

impl Layout {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        self.params
            .push((format!("{name}.weight"), vec![cout, cin, k, k], Init::KaimingFanOut));
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.params.push((format!("{name}.weight"), vec![c], Init::Const(1.0)));
        self.params.push((format!("{name}.bias"), vec![c], Init::Const(0.0)));
        self.buffers.push((format!("{name}.running_mean"), vec![c], 0.0));
        self.buffers.push((format!("{name}.running_var"), vec![c], 1.0));
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) {
        self.params
            .push((format!("{name}.weight"), vec![out, inp], Init::FanInUniform(inp)));
        self.params.push((format!("{name}.bias"), vec![out], Init::FanInUniform(inp)));
    }
}

const RESNET50_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const RESNET50_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const TINY_CHANNELS: [usize; 4] = [3, 16, 32, 64];

fn layout(config: &ModelConfig) -> Layout {
    let mut l = Layout {
        params: Vec::new(),
        buffers: Vec::new(),
    };
    match config.backbone {
        Backbone::Resnet50 => {
            l.conv("conv1", 64, 3, 7);
            l.bn("bn1", 64);
            let mut cin = 64;
            for (li, (&blocks, &width)) in RESNET50_BLOCKS.iter().zip(&RESNET50_WIDTHS).enumerate() {
                for b in 0..blocks {
                    let p = format!("layer{}.{b}", li + 1);
                    l.conv(&format!("{p}.conv1"), width, cin, 1);
                    l.bn(&format!("{p}.bn1"), width);
                    l.conv(&format!("{p}.conv2"), width, width, 3);
                    l.bn(&format!("{p}.bn2"), width);
                    l.conv(&format!("{p}.conv3"), width * 4, width, 1);
                    l.bn(&format!("{p}.bn3"), width * 4);
                    if b == 0 {
                        l.conv(&format!("{p}.downsample.0"), width * 4, cin, 1);
                        l.bn(&format!("{p}.downsample.1"), width * 4);
                    }
                    cin = width * 4;
                }
            }
        }
        Backbone::TinyTestBackbone => {
            for i in 0..3 {
                l.conv(&format!("block{i}.conv"), TINY_CHANNELS[i + 1], TINY_CHANNELS[i], 3);
                l.bn(&format!("block{i}.bn"), TINY_CHANNELS[i + 1]);
            }
        }
    }
    let f = config.backbone.feature_dim();
    let [h1, h2] = [config.head_widths[0], config.head_widths[1]];
    l.linear("head.fc1", h1, f);
    l.linear("head.fc2", h2, h1);
    l.linear("head.out", 1, h2);
    l
}

/// Shapes of every parameter and buffer the configuration implies.
pub fn state_shapes(config: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let l = layout(config);
    l.params
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .chain(l.buffers.into_iter().map(|(n, s, _)| (n, s)))
        .collect()
}

/// Parameter count of the head for a feature width and two hidden widths.
pub fn head_param_count(feature_dim: usize, widths: [usize; 2]) -> usize {
    let [a, b] = widths;
    feature_dim * a + a + a * b + b + b + 1
}

/// Built network: configuration, trainable parameters and BN buffers.
pub struct Model {
    config: ModelConfig,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Tensor>,
    device: Device,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .finish()
    }
}

impl Model {
    /// Builds and initialises a model; loads backbone weights when the
    /// pretrained source is not `random`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        Self::build_inner(config, true)
    }

    /// Model with exactly the given parameters and buffers; the pretrained
    /// file, if any, is not consulted.
    pub fn from_state(config: &ModelConfig, state: &TensorMap) -> Result<Self> {
        let mut model = Self::build_inner(config, false)?;
        model.load_state(state)?;
        Ok(model)
    }

    fn build_inner(config: &ModelConfig, use_pretrained: bool) -> Result<Self> {
        config.validate()?;
        let pretrained = match config.pretrained_source {
            _ if !use_pretrained => None,
            PretrainedSource::Random => None,
            source => {
                let path = config.pretrained_path.as_deref().ok_or_else(|| {
                    Error::Init(format!("pretrained source {source:?} needs pretrained_path"))
                })?;
                Some(load_pretrained(path)?)
            }
        };
        let device = Device::Cpu;
        let dtype = config.precision.dtype();
        let lay = layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = BTreeMap::new();
        for (name, shape, init) in &lay.params {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match *init {
                Init::KaimingFanOut => {
                    let fan_out = shape[0] * shape[2] * shape[3];
                    let d = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| d.sample(&mut rng)).collect()
                }
                Init::Const(v) => vec![v; n],
                Init::FanInUniform(fan_in) => {
                    let b = 1.0 / (fan_in as f64).sqrt();
                    let d = Uniform::new(-b, b).expect("non-empty range");
                    (0..n).map(|_| d.sample(&mut rng)).collect()
                }
            };
            let t = Tensor::from_vec(data, shape.as_slice(), &device)?.to_dtype(dtype)?;
            params.insert(name.clone(), Var::from_tensor(&t)?);
        }
        let mut buffers = BTreeMap::new();
        for (name, shape, v) in &lay.buffers {
            let t = Tensor::full(*v, shape.as_slice(), &device)?.to_dtype(dtype)?;
            buffers.insert(name.clone(), t);
        }
        let mut model = Self {
            config: config.clone(),
            params,
            buffers,
            device,
        };
        if let Some(weights) = pretrained {
            model.load_backbone(&weights)?;
        }
        Ok(model)
    }

    fn load_backbone(&mut self, weights: &TensorMap) -> Result<()> {
        let mut loaded = 0;
        let names: Vec<String> = self
            .params
            .keys()
            .chain(self.buffers.keys())
            .filter(|n| !n.starts_with("head."))
            .cloned()
            .collect();
        for name in names {
            let t = weights
                .get(&name)
                .ok_or_else(|| Error::Init(format!("pretrained weights lack `{name}`")))?;
            self.set_tensor(&name, t).map_err(|e| Error::Init(e.to_string()))?;
            loaded += 1;
        }
        if loaded == 0 {
            return Err(Error::Init("pretrained file matched no backbone tensors".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("head."))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// `(name, trainable)` for every parameter. Nothing is ever frozen: every
    /// parameter is a gradient-tracked variable updated by the optimizer.
    pub fn trainable_flags(&self) -> Vec<(String, bool)> {
        self.params
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().is_variable()))
            .collect()
    }

    /// Snapshot of parameters and buffers, widened to `f64`.
    pub fn state(&self) -> Result<TensorMap> {
        let mut out = TensorMap::new();
        for (name, t) in self
            .params
            .iter()
            .map(|(n, v)| (n, v.as_tensor()))
            .chain(self.buffers.iter())
        {
            out.insert(name.clone(), host(t)?);
        }
        Ok(out)
    }

    /// Replaces parameters and buffers from a full snapshot. Names and shapes
    /// must match exactly.
    pub fn load_state(&mut self, state: &TensorMap) -> Result<()> {
        let expected = self.params.len() + self.buffers.len();
        if state.len() != expected {
            return Err(Error::Checkpoint(format!(
                "state holds {} tensors, model has {expected}",
                state.len()
            )));
        }
        for (name, t) in state {
            self.set_tensor(name, t)?;
        }
        Ok(())
    }

    /// Overwrites one parameter or buffer.
    pub fn set_tensor(&mut self, name: &str, value: &HostTensor) -> Result<()> {
        let dtype = self.dtype();
        let make = |current: &Tensor| -> Result<Tensor> {
            if current.dims() != value.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    value.shape,
                    current.dims()
                )));
            }
            Ok(Tensor::from_vec(value.data.clone(), value.shape.as_slice(), &self.device)?.to_dtype(dtype)?)
        };
        if let Some(var) = self.params.get(name) {
            let t = make(var.as_tensor())?;
            var.set(&t)?;
        } else if let Some(buf) = self.buffers.get(name) {
            let t = make(buf)?;
            self.buffers.insert(name.to_string(), t);
        } else {
            return Err(Error::Checkpoint(format!("unknown tensor `{name}`")));
        }
        Ok(())
    }

    /// Stacks equally sized aligned faces into a `B x 3 x S x S` tensor.
    pub fn batch(&self, images: &[&Image]) -> Result<Tensor> {
        let s = self.config.input_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            if img.width() != s || img.height() != s {
                return Err(Error::InvalidInput(format!(
                    "face is {}x{}, model expects {s}x{s}",
                    img.width(),
                    img.height()
                )));
            }
            data.extend(img.to_chw());
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, s, s), &self.device)?.to_dtype(self.dtype())?)
    }

    /// Evaluation-mode forward: batch norm uses running statistics, so each
    /// output depends only on its own input.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_impl(x, None)?)
    }

    /// Training-mode forward: batch norm uses batch statistics and the
    /// running statistics are updated.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut updates = Vec::new();
        let out = self.forward_impl(x, Some(&mut updates))?;
        for (name, t) in updates {
            self.buffers.insert(name, t);
        }
        Ok(out)
    }

    /// Raw (unclamped) scores of aligned faces, evaluation mode.
    pub fn predict(&self, images: &[&Image]) -> Result<Vec<f64>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let y = self.forward_eval(&self.batch(images)?)?;
        Ok(y.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        match x.dims() {
            [b, 3, h, w] if *b > 0 && *h == s && *w == s => Ok(()),
            dims => Err(Error::InvalidInput(format!("expected B x 3 x {s} x {s} input, got {dims:?}"))),
        }
    }

    fn forward_impl(&self, x: &Tensor, updates: Option<&mut Vec<(String, Tensor)>>) -> Result<Tensor> {
        self.check_input(x)?;
        let mut ctx = Ctx { model: self, updates };
        let x = x.to_dtype(self.dtype())?;
        let norm = self.config.normalization;
        let mean = Tensor::from_vec(norm.mean.to_vec(), (1, 3, 1, 1), &self.device)?.to_dtype(self.dtype())?;
        let std = Tensor::from_vec(norm.std.to_vec(), (1, 3, 1, 1), &self.device)?.to_dtype(self.dtype())?;
        let x = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let features = match self.config.backbone {
            Backbone::Resnet50 => ctx.resnet50(&x)?,
            Backbone::TinyTestBackbone => ctx.tiny(&x)?,
        };
        let h = ctx.linear("head.fc1", &features)?.relu()?;
        let h = ctx.linear("head.fc2", &h)?.relu()?;
        let y = ctx.linear("head.out", &h)?;
        Ok(y.squeeze(D::Minus1)?)
    }
}

struct Ctx<'a> {
    model: &'a Model,
    updates: Option<&'a mut Vec<(String, Tensor)>>,
}

impl Ctx<'_> {
    fn p(&self, name: &str) -> &Tensor {
        self.model.params[name].as_tensor()
    }

    fn conv(&self, name: &str, x: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
        x.conv2d(self.p(&format!("{name}.weight")), padding, stride, 1, 1)
    }

    fn bn(&mut self, name: &str, x: &Tensor) -> candle_core::Result<Tensor> {
        let c = x.dim(1)?;
        let w = self.p(&format!("{name}.weight")).reshape((1, c, 1, 1))?;
        let b = self.p(&format!("{name}.bias")).reshape((1, c, 1, 1))?;
        let rm_name = format!("{name}.running_mean");
        let rv_name = format!("{name}.running_var");
        let normed = match self.updates.as_deref_mut() {
            None => {
                let rm = self.model.buffers[&rm_name].reshape((1, c, 1, 1))?;
                let rv = self.model.buffers[&rv_name].reshape((1, c, 1, 1))?;
                x.broadcast_sub(&rm)?.broadcast_div(&rv.affine(1.0, BN_EPS)?.sqrt()?)?
            }
            Some(updates) => {
                let n = x.elem_count() / c;
                let mean = x.mean_keepdim((0, 2, 3))?;
                let xc = x.broadcast_sub(&mean)?;
                let var = xc.sqr()?.mean_keepdim((0, 2, 3))?;
                let out = xc.broadcast_div(&var.affine(1.0, BN_EPS)?.sqrt()?)?;
                let unbiased = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
                let m = BN_MOMENTUM;
                let rm = &self.model.buffers[&rm_name];
                let rv = &self.model.buffers[&rv_name];
                let new_rm = (rm.affine(1.0 - m, 0.0)? + mean.detach().flatten_all()?.affine(m, 0.0)?)?;
                let new_rv = (rv.affine(1.0 - m, 0.0)? + var.detach().flatten_all()?.affine(m * unbiased, 0.0)?)?;
                updates.push((rm_name, new_rm));
                updates.push((rv_name, new_rv));
                out
            }
        };
        normed.broadcast_mul(&w)?.broadcast_add(&b)
    }

    fn linear(&self, name: &str, x: &Tensor) -> candle_core::Result<Tensor> {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        x.matmul(&w.t()?)?.broadcast_add(b)
    }

    fn tiny(&mut self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = x.clone();
        for i in 0..3 {
            h = self.conv(&format!("block{i}.conv"), &h, 2, 1)?;
            h = self.bn(&format!("block{i}.bn"), &h)?.relu()?;
        }
        h.mean((2, 3))
    }

    fn resnet50(&mut self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.conv("conv1", x, 2, 3)?;
        let h = self.bn("bn1", &h)?.relu()?;
        // post-ReLU activations are non-negative, so zero padding equals -inf padding
        let h = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut h = h.max_pool2d_with_stride(3, 2)?;
        for (li, &blocks) in RESNET50_BLOCKS.iter().enumerate() {
            for b in 0..blocks {
                let stride = if li > 0 && b == 0 { 2 } else { 1 };
                h = self.bottleneck(&format!("layer{}.{b}", li + 1), &h, stride, b == 0)?;
            }
        }
        h.mean((2, 3))
    }

    fn bottleneck(&mut self, p: &str, x: &Tensor, stride: usize, downsample: bool) -> candle_core::Result<Tensor> {
        let h = self.conv(&format!("{p}.conv1"), x, 1, 0)?;
        let h = self.bn(&format!("{p}.bn1"), &h)?.relu()?;
        let h = self.conv(&format!("{p}.conv2"), &h, stride, 1)?;
        let h = self.bn(&format!("{p}.bn2"), &h)?.relu()?;
        let h = self.conv(&format!("{p}.conv3"), &h, 1, 0)?;
        let h = self.bn(&format!("{p}.bn3"), &h)?;
        let skip = if downsample {
            let s = self.conv(&format!("{p}.downsample.0"), x, stride, 0)?;
            self.bn(&format!("{p}.downsample.1"), &s)?
        } else {
            x.clone()
        };
        (h + skip)?.relu()
    }
}

fn host(t: &Tensor) -> Result<HostTensor> {
    Ok(HostTensor::new(
        t.dims().to_vec(),
        t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
    ))
}

fn load_pretrained(path: &Path) -> Result<TensorMap> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Init(format!("cannot read pretrained weights {}: {e}", path.display())))?;
    let (map, _) = tensorfile::decode(&bytes)
        .map_err(|e| Error::Init(format!("{} is not a weight file: {e}", path.display())))?;
    // tolerate a `backbone.` prefix from exporters that wrap the network
    Ok(map
        .into_iter()
        .map(|(k, v)| (k.strip_prefix("backbone.").map(str::to_string).unwrap_or(k), v))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> Model {
        Model::build(&ModelConfig::tiny(16, seed)).unwrap()
    }

    fn images(n: usize, s: usize) -> Vec<Image> {
        (0..n)
            .map(|k| {
                Image::from_fn(s, s, |x, y| {
                    let v = ((x * 3 + y * 5 + k * 7) % 17) as f32 / 16.0;
                    [v, 1.0 - v, 0.25 + 0.5 * v]
                })
            })
            .collect()
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_score(-3.0).unwrap(), 0.0);
        assert_eq!(clamp_score(70.0).unwrap(), 63.0);
        assert_eq!(clamp_score(17.2).unwrap(), 17.2);
        assert!(matches!(clamp_score(f64::NAN), Err(Error::Numeric(_))));
        assert!(matches!(clamp_score(f64::INFINITY), Err(Error::Numeric(_))));
    }

    #[test]
    fn head_counts() {
        assert_eq!(head_param_count(2048, [512, 128]), 2048 * 512 + 512 + 512 * 128 + 128 + 128 + 1);
        assert_eq!(head_param_count(2048, [512, 128]), 1_114_881);
        // 64·512+512 + 512·128+128 + 128+1
        assert_eq!(head_param_count(64, [512, 128]), 99_073);
        let m = tiny(0);
        assert_eq!(m.head_param_count(), 99_073);
        assert_eq!(m.params()["head.fc1.weight"].dims(), &[512, 64]);
        assert_eq!(m.params()["head.fc2.weight"].dims(), &[128, 512]);
        assert_eq!(m.params()["head.out.weight"].dims(), &[1, 128]);
    }

    #[test]
    fn resnet50_layout_matches_torchvision() {
        let cfg = ModelConfig {
            pretrained_source: PretrainedSource::Random,
            ..ModelConfig::default()
        };
        let lay = layout(&cfg);
        let backbone: usize = lay
            .params
            .iter()
            .filter(|(n, _, _)| !n.starts_with("head."))
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum();
        // torchvision resnet50 has 25,557,032 parameters, 2,049,000 of them in fc
        assert_eq!(backbone, 25_557_032 - 2_049_000);
        assert!(lay.params.iter().any(|(n, s, _)| n == "layer4.2.conv3.weight" && s == &[2048, 512, 1, 1]));
        assert!(lay.buffers.iter().any(|(n, _, _)| n == "layer3.0.downsample.1.running_var"));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::tiny(16, 0);
        c.head_widths = vec![512, 512, 128];
        assert!(matches!(Model::build(&c), Err(Error::Config(_))));
        c.head_widths = vec![0, 128];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.pretrained_path = Some("/nonexistent/weights.safetensors".into());
        assert!(matches!(Model::build(&c), Err(Error::Init(_))));
        c.pretrained_path = None;
        assert!(matches!(Model::build(&c), Err(Error::Init(_))));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        assert_eq!(tiny(3).state().unwrap(), tiny(3).state().unwrap());
        assert_ne!(tiny(3).state().unwrap(), tiny(4).state().unwrap());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let m = tiny(1);
        let imgs = images(3, 16);
        let one = m.predict(&[&imgs[0]]).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0].is_finite());
        let dup = m.predict(&[&imgs[1], &imgs[1]]).unwrap();
        assert_eq!(dup[0], dup[1]);
        let fwd = m.predict(&[&imgs[0], &imgs[1], &imgs[2]]).unwrap();
        let rev = m.predict(&[&imgs[2], &imgs[1], &imgs[0]]).unwrap();
        for i in 0..3 {
            assert!((fwd[i] - rev[2 - i]).abs() < 1e-5);
        }
        let wrong = images(1, 12);
        assert!(matches!(m.predict(&[&wrong[0]]), Err(Error::InvalidInput(_))));
        let bad = Tensor::zeros((2, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.forward_eval(&bad), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn every_parameter_is_trainable_and_receives_gradient() {
        let mut m = tiny(2);
        assert!(m.trainable_flags().iter().all(|(_, t)| *t));
        let imgs = images(4, 16);
        let x = m.batch(&imgs.iter().collect::<Vec<_>>()).unwrap();
        let y = m.forward_train(&x).unwrap();
        let grads = y.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        for (name, var) in m.params() {
            let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no gradient for {name}"));
            assert_eq!(g.dims(), var.dims());
        }
    }

    #[test]
    fn training_forward_updates_running_stats() {
        let mut m = tiny(5);
        let before = m.buffers()["block0.bn.running_mean"].to_vec1::<f32>().unwrap();
        let imgs = images(2, 16);
        let x = m.batch(&imgs.iter().collect::<Vec<_>>()).unwrap();
        m.forward_eval(&x).unwrap();
        assert_eq!(m.buffers()["block0.bn.running_mean"].to_vec1::<f32>().unwrap(), before);
        m.forward_train(&x).unwrap();
        assert_ne!(m.buffers()["block0.bn.running_mean"].to_vec1::<f32>().unwrap(), before);
    }

    #[test]
    fn state_round_trip_and_shape_mismatch() {
        let a = tiny(7);
        let mut b = tiny(8);
        b.load_state(&a.state().unwrap()).unwrap();
        assert_eq!(a.state().unwrap(), b.state().unwrap());
        let mut wide = Model::build(&ModelConfig {
            head_widths: vec![256, 128],
            ..ModelConfig::tiny(16, 0)
        })
        .unwrap();
        assert!(matches!(wide.load_state(&a.state().unwrap()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn pretrained_backbone_loads_from_file() {
        let donor = tiny(9);
        let mut state = donor.state().unwrap();
        state.retain(|k, _| !k.starts_with("head."));
        let state: TensorMap = state.into_iter().map(|(k, v)| (format!("backbone.{k}"), v)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        std::fs::write(&path, tensorfile::encode(&state, Default::default()).unwrap()).unwrap();
        let cfg = ModelConfig {
            pretrained_source: PretrainedSource::GenericImagenet,
            pretrained_path: Some(path),
            ..ModelConfig::tiny(16, 1)
        };
        let m = Model::build(&cfg).unwrap();
        let got = m.state().unwrap();
        assert_eq!(got["block1.conv.weight"], donor.state().unwrap()["block1.conv.weight"]);
        assert_ne!(got["head.fc1.weight"], donor.state().unwrap()["head.fc1.weight"]);
    }
}
