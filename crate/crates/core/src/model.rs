//! The fully-convolutional three-headed network.
//!
//! Backbone: 3×3 convolutions with ReLU, strides replaced by dilation so the
//! feature map keeps the input resolution, followed by three linear 2×2
//! convolutions producing the 128-channel output. That output feeds
//!
//! * an l2 normalization giving the descriptors `X`,
//! * square of the normalized descriptors → 1×1 conv (2 channels) →
//!   softmax → channel 0, giving the reliability map `R`,
//! * the same with separate weights, giving the repeatability map `S`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::io::{self, ByteReader, ByteWriter};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

/// Descriptor dimension D.
pub const DESCRIPTOR_DIM: usize = 128;

/// Smallest accepted input side. Smaller images still run but the
/// border-dominated outputs are meaningless.
pub const MIN_INPUT_SIZE: usize = 16;

const MODEL_MAGIC: &[u8; 4] = b"R2D2";
const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Base widths of the 3×3 stages.
    pub backbone_widths: Vec<usize>,
    pub backbone_dilations: Vec<usize>,
    /// Base widths of the 2×2 tail; the last entry is the descriptor width
    /// and is never scaled.
    pub tail_widths: Vec<usize>,
    pub tail_dilations: Vec<usize>,
    /// Scales every width except the final one.
    pub width_multiplier: f64,
    /// Logits per confidence head (softmax over these, channel 0 kept).
    pub head_channels: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl NetworkConfig {
    /// The reference network (~0.48M weights).
    pub fn base() -> Self {
        Self {
            backbone_widths: vec![32, 32, 64, 64, 128, 128],
            backbone_dilations: vec![1, 1, 2, 2, 4, 4],
            tail_widths: vec![128, 128, DESCRIPTOR_DIM],
            tail_dilations: vec![4, 8, 16],
            width_multiplier: 1.0,
            head_channels: 2,
            seed: 0,
        }
    }

    /// Widened variant with roughly twice the weights (~1.0M).
    pub fn wide() -> Self {
        Self {
            width_multiplier: 1.5,
            ..Self::base()
        }
    }

    /// Narrow, small-receptive-field variant for CPU-scale experiments.
    pub fn toy() -> Self {
        Self {
            backbone_widths: vec![32, 32, 64, 64, 128, 128],
            backbone_dilations: vec![1, 1, 1, 2, 2, 2],
            tail_widths: vec![128, 128, DESCRIPTOR_DIM],
            tail_dilations: vec![2, 2, 4],
            width_multiplier: 0.125,
            head_channels: 2,
            seed: 0,
        }
    }

    fn scaled(&self, w: usize) -> usize {
        ((w as f64 * self.width_multiplier).round() as usize).max(1)
    }

    /// Resolved layer stack (without heads).
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        if self.backbone_widths.len() != self.backbone_dilations.len()
            || self.tail_widths.len() != self.tail_dilations.len()
        {
            return Err(Error::InvalidArgument(
                "each width needs a matching dilation".into(),
            ));
        }
        if self.backbone_dilations.iter().chain(&self.tail_dilations).any(|&d| d == 0) {
            return Err(Error::InvalidArgument("dilations must be >= 1".into()));
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::InvalidArgument("width multiplier must be positive".into()));
        }
        if self.head_channels < 2 {
            return Err(Error::InvalidArgument("heads need at least 2 channels".into()));
        }
        let total = self.backbone_widths.len() + self.tail_widths.len();
        if total == 0 {
            return Err(Error::InvalidArgument("network has no layers".into()));
        }
        let mut layers = Vec::with_capacity(total);
        let mut cin = 3;
        let stages = self
            .backbone_widths
            .iter()
            .zip(&self.backbone_dilations)
            .map(|(&w, &d)| (w, d, 3, true))
            .chain(
                self.tail_widths
                    .iter()
                    .zip(&self.tail_dilations)
                    .map(|(&w, &d)| (w, d, 2, false)),
            );
        for (i, (w, dilation, kernel, relu)) in stages.enumerate() {
            let cout = if i + 1 == total { w } else { self.scaled(w) };
            layers.push(LayerSpec {
                kernel,
                cin,
                cout,
                dilation,
                relu,
            });
            cin = cout;
        }
        if cin != DESCRIPTOR_DIM {
            return Err(Error::InvalidArgument(format!(
                "final width {cin} must equal the descriptor dimension {DESCRIPTOR_DIM}"
            )));
        }
        Ok(layers)
    }

    /// Receptive field of the backbone in pixels.
    pub fn receptive_field(&self) -> usize {
        self.backbone_dilations
            .iter()
            .map(|d| 2 * d)
            .chain(self.tail_dilations.iter().copied())
            .sum::<usize>()
            + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub dilation: usize,
    pub relu: bool,
}

impl LayerSpec {
    pub fn weight_count(&self) -> usize {
        self.cout * self.kernel * self.kernel * self.cin + self.cout
    }
}

/// Dense per-pixel outputs of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutputs<T> {
    /// `[H, W, 128]`, unit norm per pixel.
    pub descriptors: Tensor<T>,
    /// `[H, W]`, in `[0, 1]`.
    pub repeatability: Tensor<T>,
    /// `[H, W]`, in `[0, 1]`.
    pub reliability: Tensor<T>,
}

/// Tape handles for the outputs of [`Network::forward`].
#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    pub descriptors: Var,
    pub repeatability: Var,
    pub reliability: Var,
}

/// Anything that produces dense outputs for an image; the extractor only
/// needs this.
pub trait DenseModel: Sync {
    fn infer(&self, image: &Tensor<f32>) -> Result<NetworkOutputs<f32>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Scalar> {
    config: NetworkConfig,
    layers: Vec<LayerSpec>,
    /// `[kernel, bias]` per layer, then reliability head, then repeatability
    /// head.
    params: Vec<Tensor<T>>,
}

fn head_spec(channels: usize) -> LayerSpec {
    LayerSpec {
        kernel: 1,
        cin: DESCRIPTOR_DIM,
        cout: channels,
        dilation: 1,
        relu: false,
    }
}

/// Checks an input image: `[H, W, 3]`, large enough, finite.
pub fn validate_image<T: Scalar>(image: &Tensor<T>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("forward", format!("expected an H×W×3 image, got {s:?}")));
    }
    if s[0] < MIN_INPUT_SIZE || s[1] < MIN_INPUT_SIZE {
        return Err(Error::InvalidArgument(format!(
            "image {}×{} smaller than the {MIN_INPUT_SIZE}-pixel minimum",
            s[1], s[0]
        )));
    }
    if !image.all_finite() {
        return Err(Error::InvalidArgument("image contains non-finite pixels".into()));
    }
    Ok(())
}

impl<T: Scalar> Network<T> {
    /// Builds the layer stack and draws seeded fan-in-scaled uniform weights
    /// (He bound for ReLU layers, LeCun bound otherwise); biases start at 0.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        let layers = config.layers()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let heads = [head_spec(config.head_channels), head_spec(config.head_channels)];
        let mut params = Vec::with_capacity(2 * (layers.len() + 2));
        for spec in layers.iter().chain(&heads) {
            let fan_in = (spec.kernel * spec.kernel * spec.cin) as f64;
            let bound = if spec.relu { (6.0 / fan_in).sqrt() } else { (3.0 / fan_in).sqrt() };
            let n = spec.cout * spec.kernel * spec.kernel * spec.cin;
            let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
            params.push(Tensor::new([spec.cout, spec.kernel, spec.kernel, spec.cin], data)?);
            params.push(Tensor::zeros([spec.cout]));
        }
        Ok(Self {
            config,
            layers,
            params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Puts every parameter on the tape as a leaf.
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect()
    }

    /// Records a forward pass. `params` comes from [`Network::register`].
    pub fn forward(&self, tape: &mut Tape<T>, params: &[Var], image: Var) -> Result<OutputVars> {
        validate_image(tape.value(image))?;
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "forward",
                format!("{} parameter handles for {} parameters", params.len(), self.params.len()),
            ));
        }
        let mut x = image;
        for (i, spec) in self.layers.iter().enumerate() {
            x = tape.conv2d(x, params[2 * i], params[2 * i + 1], spec.dilation)?;
            if spec.relu {
                x = tape.relu(x);
            }
        }
        let descriptors = tape.l2_normalize_channels(x);
        let squared = tape.square(descriptors);
        let base = 2 * self.layers.len();
        let mut head = |offset: usize| -> Result<Var> {
            let logits = tape.conv2d(squared, params[base + offset], params[base + offset + 1], 1)?;
            let probs = tape.softmax_channels(logits);
            tape.select_channel(probs, 0)
        };
        let reliability = head(0)?;
        let repeatability = head(2)?;
        Ok(OutputVars {
            descriptors,
            repeatability,
            reliability,
        })
    }

    /// Forward pass without recording; intermediates are dropped as soon as
    /// they are consumed.
    pub fn infer_generic(&self, image: &Tensor<T>) -> Result<NetworkOutputs<T>> {
        validate_image(image)?;
        let mut x = image.clone();
        for (i, spec) in self.layers.iter().enumerate() {
            x = kernels::conv2d(&x, &self.params[2 * i], &self.params[2 * i + 1], spec.dilation)?;
            if spec.relu {
                for v in x.data_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
            }
        }
        let descriptors = kernels::l2_normalize_last(&x);
        let squared = descriptors.map(|v| v * v);
        let base = 2 * self.layers.len();
        let head = |offset: usize| -> Result<Tensor<T>> {
            let logits = kernels::conv2d(&squared, &self.params[base + offset], &self.params[base + offset + 1], 1)?;
            let probs = kernels::softmax_last(&logits);
            let c = probs.channels();
            let (h, w) = (probs.shape()[0], probs.shape()[1]);
            let data = probs.data().iter().step_by(c).copied().collect();
            Tensor::new([h, w], data)
        };
        Ok(NetworkOutputs {
            reliability: head(0)?,
            repeatability: head(2)?,
            descriptors,
        })
    }
}

impl DenseModel for Network<f32> {
    fn infer(&self, image: &Tensor<f32>) -> Result<NetworkOutputs<f32>> {
        self.infer_generic(image)
    }
}

impl Network<f32> {
    pub(crate) fn write_to(&self, w: &mut ByteWriter) {
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        let c = &self.config;
        w.f64(c.width_multiplier);
        w.u64(c.seed);
        w.len_u32(c.head_channels);
        for (widths, dilations) in [
            (&c.backbone_widths, &c.backbone_dilations),
            (&c.tail_widths, &c.tail_dilations),
        ] {
            w.len_u32(widths.len());
            for (&width, &d) in widths.iter().zip(dilations) {
                w.len_u32(width);
                w.len_u32(d);
            }
        }
        w.len_u32(self.params.len());
        for p in &self.params {
            w.len_u32(p.ndim());
            for &d in p.shape() {
                w.len_u32(d);
            }
            for &v in p.data() {
                w.f32(v);
            }
        }
    }

    pub(crate) fn read_from(r: &mut ByteReader<'_>) -> Result<Self> {
        r.expect_magic(MODEL_MAGIC, "model")?;
        r.expect_version(MODEL_VERSION, "model")?;
        let width_multiplier = r.f64()?;
        let seed = r.u64()?;
        let head_channels = r.len_u32()?;
        let read_stack = |r: &mut ByteReader<'_>| -> Result<(Vec<usize>, Vec<usize>)> {
            let n = r.len_u32()?;
            if n > 1024 {
                return Err(Error::Format(format!("implausible layer count {n}")));
            }
            let mut widths = Vec::with_capacity(n);
            let mut dilations = Vec::with_capacity(n);
            for _ in 0..n {
                widths.push(r.len_u32()?);
                dilations.push(r.len_u32()?);
            }
            Ok((widths, dilations))
        };
        let (backbone_widths, backbone_dilations) = read_stack(r)?;
        let (tail_widths, tail_dilations) = read_stack(r)?;
        let config = NetworkConfig {
            backbone_widths,
            backbone_dilations,
            tail_widths,
            tail_dilations,
            width_multiplier,
            head_channels,
            seed,
        };
        let mut net = Network::<f32>::new(config)?;
        let n = r.len_u32()?;
        if n != net.params.len() {
            return Err(Error::Format(format!(
                "model stores {n} tensors, architecture needs {}",
                net.params.len()
            )));
        }
        for p in &mut net.params {
            let ndim = r.len_u32()?;
            let shape = (0..ndim).map(|_| r.len_u32()).collect::<Result<Vec<_>>>()?;
            if shape != p.shape() {
                return Err(Error::Format(format!(
                    "tensor shape {shape:?} does not match architecture {:?}",
                    p.shape()
                )));
            }
            let values = r.f32_vec(p.len())?;
            p.data_mut().copy_from_slice(&values);
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        self.write_to(&mut w);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let net = Self::read_from(&mut r)?;
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after model", r.remaining())));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    /// Loads a model file; a checkpoint file is accepted too (its optimizer
    /// section is ignored).
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io::read_file(path)?;
        let mut r = ByteReader::new(&bytes);
        Self::read_from(&mut r)
    }
}
