//! Full architecture: causal stem, `B` x (gated residual block, attention
//! block), then `elu` and a 1x1 head producing mixture parameters.

use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

use crate::layers::{self, AttentionParams, CausalConvParams, CausalMode};
use crate::likelihood::{LikelihoodError, MixtureLayout, MixtureParams, PixelAlphabet};
use crate::tensor::{DType, Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("parameter set does not match config: {0}")]
    Params(String),
    #[error("batch of {got} pixels does not hold whole images of {per_image}")]
    Batch { got: usize, per_image: usize },
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Architecture hyperparameters and the image geometry they are built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub blocks: usize,
    pub repeats: usize,
    pub filters: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub mixtures: usize,
    pub dropout_rate: f64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub depth: u32,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale configuration: small enough to train in minutes on a CPU.
    fn default() -> Self {
        ModelConfig {
            blocks: 2,
            repeats: 2,
            filters: 32,
            key_dim: 4,
            value_dim: 16,
            mixtures: 2,
            dropout_rate: 0.0,
            channels: 1,
            height: 8,
            width: 8,
            depth: 16,
            precision: Precision::F64,
            seed: 0,
        }
    }
}

/// Keys of the `key = value` config record, in serialization order.
pub const MODEL_KEYS: [&str; 13] = [
    "blocks",
    "repeats",
    "filters",
    "key_dim",
    "value_dim",
    "mixtures",
    "dropout_rate",
    "channels",
    "height",
    "width",
    "depth",
    "precision",
    "seed",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, ModelError> {
    value
        .parse()
        .map_err(|_| ModelError::Config(format!("bad value for {key}: {value:?}")))
}

impl ModelConfig {
    /// The CIFAR-10 architecture: 12 blocks of 4 repeats with 256 filters,
    /// attention keys of 16 and values of 128, 10 mixture components.
    pub fn cifar10_scale() -> Self {
        ModelConfig {
            blocks: 12,
            repeats: 4,
            filters: 256,
            key_dim: 16,
            value_dim: 128,
            mixtures: 10,
            dropout_rate: 0.5,
            channels: 3,
            height: 32,
            width: 32,
            depth: 256,
            precision: Precision::F32,
            seed: 0,
        }
    }

    /// The ImageNet 32x32 architecture: as CIFAR-10 but 32 mixture
    /// components and no dropout.
    pub fn imagenet32_scale() -> Self {
        ModelConfig {
            mixtures: 32,
            dropout_rate: 0.0,
            ..Self::cifar10_scale()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("blocks", self.blocks),
            ("repeats", self.repeats),
            ("filters", self.filters),
            ("key_dim", self.key_dim),
            ("value_dim", self.value_dim),
            ("mixtures", self.mixtures),
            ("height", self.height),
            ("width", self.width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.filters.is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "filters must be even, got {}",
                self.filters
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(ModelError::Config("image extent exceeds 65535".into()));
        }
        MixtureLayout::new(self.mixtures, self.channels)?;
        PixelAlphabet::new(self.depth)?;
        Ok(())
    }

    pub fn alphabet(&self) -> PixelAlphabet {
        PixelAlphabet::new(self.depth).expect("validated depth")
    }

    pub fn layout(&self) -> MixtureLayout {
        MixtureLayout {
            mixtures: self.mixtures,
            channels: self.channels,
        }
    }

    /// Subpixels per image, `C*H*W`.
    pub fn dims(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Writes `key = value` lines in [`MODEL_KEYS`] order.
    pub fn write_record(&self, out: &mut String) {
        let values: [String; 13] = [
            self.blocks.to_string(),
            self.repeats.to_string(),
            self.filters.to_string(),
            self.key_dim.to_string(),
            self.value_dim.to_string(),
            self.mixtures.to_string(),
            format!("{:?}", self.dropout_rate),
            self.channels.to_string(),
            self.height.to_string(),
            self.width.to_string(),
            self.depth.to_string(),
            self.precision.as_str().to_string(),
            self.seed.to_string(),
        ];
        for (k, v) in MODEL_KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
    }

    pub fn to_record(&self) -> String {
        let mut s = String::new();
        self.write_record(&mut s);
        s
    }

    /// Applies one `key = value` assignment. Returns `Ok(false)` for keys
    /// this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ModelError> {
        match key {
            "blocks" => self.blocks = parse(key, value)?,
            "repeats" => self.repeats = parse(key, value)?,
            "filters" => self.filters = parse(key, value)?,
            "key_dim" => self.key_dim = parse(key, value)?,
            "value_dim" => self.value_dim = parse(key, value)?,
            "mixtures" => self.mixtures = parse(key, value)?,
            "dropout_rate" => self.dropout_rate = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(ModelError::Config(format!("bad precision {value:?}"))),
                }
            }
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses a record produced by [`ModelConfig::write_record`]. Every key
    /// must be present exactly once.
    pub fn from_record(text: &str) -> Result<Self, ModelError> {
        let mut cfg = ModelConfig::default();
        let mut seen = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("malformed line {line:?}")))?;
            let k = k.trim();
            if !cfg.set(k, v.trim())? {
                return Err(ModelError::Config(format!("unknown key {k:?}")));
            }
            if seen.contains(&k.to_string()) {
                return Err(ModelError::Config(format!("duplicate key {k:?}")));
            }
            seen.push(k.to_string());
        }
        if seen.len() != MODEL_KEYS.len() {
            return Err(ModelError::Config("incomplete model record".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Names and shapes of every parameter tensor, in the stable enumeration
/// order shared by optimizer state, the EMA shadow and checkpoints.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (f, c) = (cfg.filters, cfg.channels);
    let mut out = Vec::new();
    let conv = |prefix: &str,
                c_in: usize,
                c_out: usize,
                mode: CausalMode,
                out: &mut Vec<(String, Vec<usize>)>| {
        let (dh, dw) = mode.down_kernel();
        let (rh, rw) = mode.down_right_kernel();
        out.push((format!("{prefix}.down.kernel"), vec![c_out, c_in, dh, dw]));
        out.push((format!("{prefix}.down.bias"), vec![c_out]));
        out.push((
            format!("{prefix}.down_right.kernel"),
            vec![c_out, c_in, rh, rw],
        ));
        out.push((format!("{prefix}.down_right.bias"), vec![c_out]));
    };
    conv("stem", c, f, CausalMode::Strict, &mut out);
    for b in 0..cfg.blocks {
        for r in 0..cfg.repeats {
            conv(
                &format!("block{b}.res{r}"),
                f,
                2 * f,
                CausalMode::Inclusive,
                &mut out,
            );
        }
        let kv_in = f + c + 2;
        out.push((
            format!("block{b}.attn.key.weight"),
            vec![cfg.key_dim, kv_in],
        ));
        out.push((format!("block{b}.attn.key.bias"), vec![cfg.key_dim]));
        out.push((
            format!("block{b}.attn.value.weight"),
            vec![cfg.value_dim, kv_in],
        ));
        out.push((format!("block{b}.attn.value.bias"), vec![cfg.value_dim]));
        out.push((
            format!("block{b}.attn.query.weight"),
            vec![cfg.key_dim, f + 2],
        ));
        out.push((format!("block{b}.attn.query.bias"), vec![cfg.key_dim]));
        out.push((format!("block{b}.attn.out.weight"), vec![f, cfg.value_dim]));
    }
    let width = cfg.layout().width();
    out.push(("head.weight".into(), vec![width, f]));
    out.push(("head.bias".into(), vec![width]));
    out
}

/// Closed-form parameter count.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (f, c) = (cfg.filters, cfg.channels);
    let (dk, dv) = (cfg.key_dim, cfg.value_dim);
    let conv = |c_in: usize, c_out: usize, mode: CausalMode| {
        let (dh, dw) = mode.down_kernel();
        let (rh, rw) = mode.down_right_kernel();
        c_out * c_in * (dh * dw + rh * rw) + 2 * c_out
    };
    let stem = conv(c, f, CausalMode::Strict);
    let repeat = conv(f, 2 * f, CausalMode::Inclusive);
    let attention = (dk + dv) * (f + c + 2 + 1) + dk * (f + 2 + 1) + f * dv;
    let width = cfg.layout().width();
    let head = width * (f + 1);
    stem + cfg.blocks * (cfg.repeats * repeat + attention) + head
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// All learnable tensors, in [`param_shapes`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub tensors: Vec<NamedTensor<T>>,
}

fn fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let tensors = param_shapes(cfg)
            .into_iter()
            .map(|(name, shape)| NamedTensor {
                tensor: Tensor::zeros(&shape),
                name,
            })
            .collect();
        ModelParams { tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors
            .iter_mut()
            .find(|t| t.name == name)
            .map(|t| &mut t.tensor)
    }

    /// Checks names and shapes against the enumeration for `cfg`.
    pub fn check(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let expected = param_shapes(cfg);
        if expected.len() != self.tensors.len() {
            return Err(ModelError::Params(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&self.tensors) {
            if *name != t.name || shape.as_slice() != t.tensor.shape() {
                return Err(ModelError::Params(format!(
                    "expected {name} {shape:?}, found {} {:?}",
                    t.name,
                    t.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// Adds every tensor to `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph<T>, cfg: &ModelConfig) -> BoundParams {
        let vars: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| graph.param(t.tensor.clone()))
            .collect();
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("parameter enumeration");
        let conv = |next: &mut dyn FnMut() -> Var| CausalConvParams {
            down_kernel: next(),
            down_bias: next(),
            down_right_kernel: next(),
            down_right_bias: next(),
        };
        let stem = conv(&mut next);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            let repeats = (0..cfg.repeats).map(|_| conv(&mut next)).collect();
            let attention = AttentionParams {
                key_weight: next(),
                key_bias: next(),
                value_weight: next(),
                value_bias: next(),
                query_weight: next(),
                query_bias: next(),
                out_weight: next(),
            };
            blocks.push(BlockParams { repeats, attention });
        }
        let head_weight = next();
        let head_bias = next();
        BoundParams {
            stem,
            blocks,
            head_weight,
            head_bias,
            all: vars,
        }
    }
}

/// Initial parameters: weights uniform in `±1/sqrt(fan_in)`, biases zero,
/// and every residual convolution and attention output projection zero so
/// that each block starts as the identity.
///
/// Stem and head are drawn before the blocks, so for a fixed seed they do
/// not depend on the block count.
pub fn init_params<T: Real, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<ModelParams<T>, ModelError> {
    cfg.validate()?;
    let mut params = ModelParams::<T>::zeros(cfg);
    let draw_order = params
        .tensors
        .iter()
        .enumerate()
        .filter(|(_, t)| t.name.starts_with("stem."))
        .chain(
            params
                .tensors
                .iter()
                .enumerate()
                .filter(|(_, t)| t.name.starts_with("head.")),
        )
        .chain(
            params
                .tensors
                .iter()
                .enumerate()
                .filter(|(_, t)| t.name.starts_with("block")),
        )
        .map(|(i, _)| i)
        .collect::<Vec<_>>();
    for i in draw_order {
        let t = &mut params.tensors[i];
        let zero_init =
            t.tensor.rank() == 1 || t.name.contains(".res") || t.name.ends_with("attn.out.weight");
        if zero_init {
            continue;
        }
        let bound = 1.0 / (fan_in(t.tensor.shape()) as f64).sqrt();
        for v in t.tensor.values_mut() {
            *v = T::lit(rng.gen_range(-bound..bound));
        }
    }
    Ok(params)
}

/// Parameters with every tensor, biases and update paths included, drawn
/// uniformly from `±scale/sqrt(fan_in)` (biases use fan-in 1). Useful for
/// probing properties that zero initialization would make vacuous.
pub fn init_params_dense<T: Real, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    rng: &mut R,
    scale: f64,
) -> Result<ModelParams<T>, ModelError> {
    cfg.validate()?;
    let mut params = ModelParams::<T>::zeros(cfg);
    for t in &mut params.tensors {
        let fan = if t.tensor.rank() == 1 {
            1
        } else {
            fan_in(t.tensor.shape())
        };
        let bound = scale / (fan as f64).sqrt();
        for v in t.tensor.values_mut() {
            *v = T::lit(rng.gen_range(-bound..bound));
        }
    }
    Ok(params)
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub repeats: Vec<CausalConvParams>,
    pub attention: AttentionParams,
}

/// Graph handles for one bound copy of [`ModelParams`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub stem: CausalConvParams,
    pub blocks: Vec<BlockParams>,
    pub head_weight: Var,
    pub head_bias: Var,
    /// Every parameter handle in enumeration order.
    pub all: Vec<Var>,
}

/// Normalizes integer pixels into a `[N,C,H,W]` constant.
pub fn normalize_images<T: Real>(
    pixels: &[u8],
    cfg: &ModelConfig,
) -> Result<Tensor<T>, ModelError> {
    let per_image = cfg.dims();
    if pixels.is_empty() || !pixels.len().is_multiple_of(per_image) {
        return Err(ModelError::Batch {
            got: pixels.len(),
            per_image,
        });
    }
    let alphabet = cfg.alphabet();
    let mut values = Vec::with_capacity(pixels.len());
    for &v in pixels {
        alphabet.check(v)?;
        values.push(alphabet.normalize(v));
    }
    let n = pixels.len() / per_image;
    Ok(Tensor::new(
        vec![n, cfg.channels, cfg.height, cfg.width],
        values,
    )?)
}

/// Builds the network on `graph` from a normalized image node and returns
/// the head output `[N, width, H, W]`.
pub fn build_network<T: Real, R: Rng + ?Sized>(
    graph: &mut Graph<T>,
    bound: &BoundParams,
    image_norm: Var,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<Var, ModelError> {
    let s = graph.shape(image_norm).to_vec();
    let positions = graph.constant(layers::positional_batch(s[0], s[2], s[3]));
    let mut x = layers::causal_stem(graph, image_norm, &bound.stem)?;
    for block in &bound.blocks {
        x = layers::gated_residual_block(
            graph,
            x,
            &block.repeats,
            cfg.dropout_rate,
            training,
            rng,
        )?;
        x = layers::attention_block(graph, x, image_norm, positions, &block.attention)?;
    }
    let x = graph.elu(x)?;
    Ok(graph.pointwise_linear(x, bound.head_weight, bound.head_bias)?)
}

/// A recorded forward pass.
pub struct Forward<T: Real> {
    pub graph: Graph<T>,
    pub head: Var,
    pub params: BoundParams,
    pub n: usize,
    layout: MixtureLayout,
    plane: usize,
}

impl<T: Real> Forward<T> {
    /// Mixture parameters of image `n` at raster position `pos`.
    pub fn mixture_at(&self, n: usize, pos: usize) -> MixtureParams<T> {
        MixtureParams::gather(
            self.layout,
            self.graph.values(self.head),
            n,
            pos,
            self.plane,
        )
    }

    pub fn head_values(&self) -> &[T] {
        self.graph.values(self.head)
    }
}

/// Runs the model on a flat `[N,C,H,W]` batch of integer pixels.
pub fn forward<T: Real, R: Rng + ?Sized>(
    pixels: &[u8],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<Forward<T>, ModelError> {
    params.check(cfg)?;
    let images = normalize_images::<T>(pixels, cfg)?;
    let n = images.shape()[0];
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, cfg);
    let image_norm = graph.constant(images);
    let head = build_network(&mut graph, &bound, image_norm, cfg, training, rng)?;
    Ok(Forward {
        graph,
        head,
        params: bound,
        n,
        layout: cfg.layout(),
        plane: cfg.height * cfg.width,
    })
}
