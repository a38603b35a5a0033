//! VGG-style encoder with a U-Net decoder and a configurable output stride.
//!
//! Every encoder stage is `convs_per_stage` 3x3 convolutions with ReLU
//! followed by a 2x2 max pool. The first `log2(output_stride)` pools halve
//! the resolution; the remaining ones keep it (stride 1, taps spaced by the
//! current dilation) and double the dilation of all later convolutions, so
//! the receptive field matches the fully strided network.
//!
//! The decoder has one stage per halving pool, deepest first: a 2x2 stride-2
//! transposed convolution with ReLU, then concatenation with the encoder
//! features that entered that pool. The plain variant follows each
//! concatenation with two 3x3 convolutions; the modified variant keeps the
//! transposed convolution as the only convolution of the stage. A 1x1
//! convolution produces the class logits.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{he_normal, AutodiffError, ConvSpec, PoolSpec, Tape, Tensor4, Var};

#[derive(Debug, Error)]
pub enum SegnetError {
    #[error("invalid output stride {stride}: {reason}")]
    InvalidOutputStride { stride: usize, reason: String },
    #[error("width mismatch: {0}")]
    WidthMismatch(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: std::path::PathBuf, reason: String },
    #[error("checkpoint was written for a different model configuration")]
    ConfigMismatch,
    #[error("i/o failure on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, SegnetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    ModifiedUnet,
    PlainUnet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub input_channels: usize,
    pub encoder_widths: Vec<usize>,
    pub convs_per_stage: usize,
    pub decoder_variant: DecoderVariant,
    pub output_stride: usize,
    pub tile_size: usize,
}

pub const DESK_WIDTHS: [usize; 5] = [16, 32, 64, 128, 256];
pub const VGG16_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 17,
            input_channels: 3,
            encoder_widths: DESK_WIDTHS.to_vec(),
            convs_per_stage: 2,
            decoder_variant: DecoderVariant::ModifiedUnet,
            output_stride: 4,
            tile_size: 224,
        }
    }
}

impl ModelConfig {
    /// Number of halving pools, `log2(output_stride)`.
    pub fn downsampling_stages(&self) -> usize {
        self.output_stride.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let os = self.output_stride;
        let bad = |reason: String| Err(SegnetError::InvalidOutputStride { stride: os, reason });
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(SegnetError::WidthMismatch(format!(
                "encoder widths {:?} must be non-empty and positive",
                self.encoder_widths
            )));
        }
        if !os.is_power_of_two() || os < 2 {
            return bad("must be a power of two of at least 2".into());
        }
        if self.downsampling_stages() > self.encoder_widths.len() {
            return bad(format!("needs more than {} encoder stages", self.encoder_widths.len()));
        }
        if self.tile_size == 0 || !self.tile_size.is_multiple_of(os) {
            return bad(format!("does not divide tile size {}", self.tile_size));
        }
        if self.num_classes < 2 {
            return Err(SegnetError::InvalidConfig("at least two classes are required".into()));
        }
        if self.input_channels == 0 || self.convs_per_stage == 0 {
            return Err(SegnetError::InvalidConfig("input channels and convs per stage must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Encoder,
    Decoder,
}

/// Shape bookkeeping for one stage, derived while the model is built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageInfo {
    pub kind: StageKind,
    pub index: usize,
    /// Dilation of the stage's 3x3 convolutions (1 in the decoder).
    pub dilation: usize,
    /// Resolution change of the stage: 2 for a halving pool or an
    /// upsampling, 1 otherwise.
    pub stride: usize,
    pub output_channels: usize,
    pub output_dims: (usize, usize),
    /// Encoder: its pre-pool features feed a decoder skip. Decoder: it
    /// concatenates a skip.
    pub skip: bool,
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv { w: usize, b: usize, spec: ConvSpec },
    ConvT { w: usize, b: usize, spec: ConvSpec },
    Relu,
    Pool(PoolSpec),
    SaveSkip,
    ConcatSkip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor4<f32>>,
    layers: Vec<Layer>,
    stages: Vec<StageInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub encoder: usize,
    pub decoder: usize,
    pub head: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.encoder + self.decoder + self.head
    }
}

struct Builder {
    names: Vec<String>,
    params: Vec<Tensor4<f32>>,
    layers: Vec<Layer>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn param(&mut self, name: String, t: Tensor4<f32>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn conv(&mut self, prefix: &str, spec: ConvSpec) {
        let (kh, kw) = spec.kernel;
        let w = he_normal([spec.out_channels, spec.in_channels, kh, kw], spec.in_channels * kh * kw, &mut self.rng);
        let w = self.param(format!("{prefix}.weight"), w);
        let b = self.param(format!("{prefix}.bias"), Tensor4::zeros([spec.out_channels, 1, 1, 1]));
        self.layers.push(Layer::Conv { w, b, spec });
    }

    fn conv_t(&mut self, prefix: &str, spec: ConvSpec) {
        let (kh, kw) = spec.kernel;
        let fan_in = spec.in_channels * kh * kw / (spec.stride.0 * spec.stride.1);
        let w = he_normal([spec.in_channels, spec.out_channels, kh, kw], fan_in, &mut self.rng);
        let w = self.param(format!("{prefix}.weight"), w);
        let b = self.param(format!("{prefix}.bias"), Tensor4::zeros([spec.out_channels, 1, 1, 1]));
        self.layers.push(Layer::ConvT { w, b, spec });
    }
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut b = Builder { names: vec![], params: vec![], layers: vec![], rng: ChaCha8Rng::seed_from_u64(seed) };
    let mut stages = Vec::new();
    let n_down = config.downsampling_stages();
    let mut size = config.tile_size;
    let mut channels = config.input_channels;
    let mut dilation = 1;
    // (channels, spatial size) of each skip, shallow first.
    let mut skips: Vec<(usize, usize)> = Vec::new();

    for (s, &width) in config.encoder_widths.iter().enumerate() {
        for j in 0..config.convs_per_stage {
            b.conv(&format!("enc{s}.conv{j}"), ConvSpec::same(channels, width, 3, dilation));
            b.layers.push(Layer::Relu);
            channels = width;
        }
        let halving = s < n_down;
        let stage_dilation = dilation;
        if halving {
            b.layers.push(Layer::SaveSkip);
            skips.push((channels, size));
            b.layers.push(Layer::Pool(PoolSpec::new(2, 2)));
            size /= 2;
        } else {
            b.layers.push(Layer::Pool(PoolSpec::atrous(2, dilation)));
            dilation *= 2;
        }
        stages.push(StageInfo {
            kind: StageKind::Encoder,
            index: s,
            dilation: stage_dilation,
            stride: if halving { 2 } else { 1 },
            output_channels: channels,
            output_dims: (size, size),
            skip: halving,
        });
    }
    debug_assert_eq!(size * config.output_stride, config.tile_size);

    for (k, &(skip_channels, skip_size)) in skips.iter().enumerate().rev() {
        let width = config.encoder_widths[k];
        b.conv_t(&format!("dec{k}.up"), ConvSpec::new(channels, width, 2).stride(2));
        b.layers.push(Layer::Relu);
        size *= 2;
        if size != skip_size {
            return Err(SegnetError::WidthMismatch(format!(
                "decoder stage {k} reaches {size}px but its skip is {skip_size}px"
            )));
        }
        b.layers.push(Layer::ConcatSkip);
        channels = width + skip_channels;
        if config.decoder_variant == DecoderVariant::PlainUnet {
            for j in 0..2 {
                b.conv(&format!("dec{k}.conv{j}"), ConvSpec::same(channels, width, 3, 1));
                b.layers.push(Layer::Relu);
                channels = width;
            }
        }
        stages.push(StageInfo {
            kind: StageKind::Decoder,
            index: k,
            dilation: 1,
            stride: 2,
            output_channels: channels,
            output_dims: (size, size),
            skip: true,
        });
    }
    b.conv("head", ConvSpec::new(channels, config.num_classes, 1));

    Ok(Model { config: config.clone(), names: b.names, params: b.params, layers: b.layers, stages })
}

impl Model {
    pub fn params(&self) -> &[Tensor4<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor4<f32>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn stages(&self) -> &[StageInfo] {
        &self.stages
    }

    /// Spatial size of the deepest encoder features.
    pub fn bottleneck_dims(&self) -> (usize, usize) {
        self.stages.iter().rev().find(|s| s.kind == StageKind::Encoder).map(|s| s.output_dims).unwrap_or_default()
    }

    pub fn param_count(&self) -> ParamCount {
        let mut c = ParamCount { encoder: 0, decoder: 0, head: 0 };
        for (name, p) in self.names.iter().zip(&self.params) {
            let slot = if name.starts_with("enc") {
                &mut c.encoder
            } else if name.starts_with("dec") {
                &mut c.decoder
            } else {
                &mut c.head
            };
            *slot += p.len();
        }
        c
    }

    /// Receptive field of one bottleneck cell, in input pixels.
    pub fn encoder_receptive_field(&self) -> usize {
        let (mut rf, mut jump) = (1, 1);
        for layer in &self.layers {
            match layer {
                Layer::Conv { spec, .. } => rf += spec.dilation.0 * (spec.kernel.0 - 1) * jump,
                Layer::Pool(p) => {
                    rf += p.dilation * (p.window - 1) * jump;
                    jump *= p.stride;
                }
                Layer::ConvT { .. } => break,
                _ => {}
            }
        }
        rf
    }

    /// Records the forward pass on `tape`, whose parameter store must hold
    /// this model's parameters (possibly cast to another precision).
    pub fn record<T: crate::autodiff::Real>(&self, tape: &mut Tape<'_, T>, input: Var) -> Result<Var> {
        self.run(tape, input, false)
    }

    fn run<T: crate::autodiff::Real>(&self, tape: &mut Tape<'_, T>, input: Var, encoder_only: bool) -> Result<Var> {
        let dims = tape.value(input).dims();
        let t = self.config.tile_size;
        if dims[1] != self.config.input_channels || dims[2] != t || dims[3] != t {
            return Err(AutodiffError::ShapeMismatch(format!(
                "batch {dims:?} does not match {} channels of {t}x{t}",
                self.config.input_channels
            ))
            .into());
        }
        let mut x = input;
        let mut skips = Vec::new();
        for layer in &self.layers {
            if encoder_only && matches!(layer, Layer::ConvT { .. }) {
                break;
            }
            x = match layer {
                Layer::Conv { w, b, spec } => {
                    let (w, b) = (tape.param(*w)?, tape.param(*b)?);
                    tape.conv2d(x, w, b, *spec)?
                }
                Layer::ConvT { w, b, spec } => {
                    let (w, b) = (tape.param(*w)?, tape.param(*b)?);
                    tape.transposed_conv2d(x, w, b, *spec)?
                }
                Layer::Relu => tape.relu(x),
                Layer::Pool(p) => tape.maxpool2d(x, *p)?,
                Layer::SaveSkip => {
                    skips.push(x);
                    x
                }
                Layer::ConcatSkip => {
                    let s = skips.pop().expect("every concatenation has a saved skip");
                    tape.concat(x, s)?
                }
            };
        }
        Ok(x)
    }

    /// Class logits `(batch, num_classes, tile, tile)`.
    pub fn forward(&self, batch: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(batch.clone());
        let y = self.record(&mut tape, x)?;
        let out = tape.value(y).clone();
        if !out.all_finite() {
            return Err(AutodiffError::NonFinite("logits".into()).into());
        }
        Ok(out)
    }

    /// Bottleneck activations, the input of the first decoder stage.
    pub fn encode(&self, batch: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(batch.clone());
        let y = self.run(&mut tape, x, true)?;
        Ok(tape.value(y).clone())
    }

    pub(crate) fn from_parts(config: ModelConfig, tensors: Vec<(String, Tensor4<f32>)>) -> Result<Model> {
        let mut m = build_model(&config, 0)?;
        if tensors.len() != m.params.len() {
            return Err(SegnetError::ConfigMismatch);
        }
        for ((name, t), (expected, slot)) in tensors.into_iter().zip(m.names.iter().zip(m.params.iter_mut())) {
            if &name != expected || t.dims() != slot.dims() {
                return Err(SegnetError::ConfigMismatch);
            }
            *slot = t;
        }
        Ok(m)
    }
}
