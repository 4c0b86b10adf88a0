//! Generator and discriminator.
//!
//! Generator: caption embedding -> text projection (fully connected, leaky
//! rectifier) -> concatenated with noise -> fully connected layer reshaped
//! to an 8x8 map with `8 * gen_filters` channels -> a stack of 5x5 stride-2
//! transposed convolutions, each doubling the side, halving channels, and
//! ending in a 3-channel tanh image.
//!
//! Discriminator: a stack of 5x5 stride-2 convolutions down to a
//! `map x map x disc_channels` feature map, a second text projection tiled
//! over that map and concatenated along channels, a 1x1 fusion convolution,
//! then two sigmoid heads (source and per-class) plus an optional auxiliary
//! head.
//!
//! Hidden layers use batch normalization except the first discriminator
//! convolution. Layers followed by batch normalization carry no bias.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{batch_to_images, images_to_batch, Image, CHANNELS};
use crate::layers::{self, BnCache, Geometry, LEAKY_SLOPE};
use crate::tensor::{ParamSet, Tensor};
use crate::text_encoder::{TextEmbedding, DEFAULT_TEXT_DIM};

/// Side of the generator's first feature map.
pub const GENERATOR_BASE: usize = 8;
pub const KERNEL: usize = 5;
pub const STRIDE: usize = 2;
pub const INIT_STD: f64 = 0.02;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Caption embedding width.
    pub text_dim: usize,
    /// Width of both text projections.
    pub latent_dim: usize,
    pub noise_dim: usize,
    /// Generator channel base; the first map has `8 * gen_filters` channels.
    pub gen_filters: usize,
    /// Channels of the first discriminator convolution (doubling after).
    pub disc_filters: usize,
    /// Side of the discriminator's final feature map.
    pub disc_map_size: usize,
    /// Channels of the discriminator's final feature map.
    pub disc_channels: usize,
    /// Channels of the 1x1 convolution after text fusion.
    pub fusion_channels: usize,
    pub resolution: usize,
    pub n_classes: usize,
    /// Width of the optional auxiliary head; 0 disables it.
    pub aux_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            text_dim: DEFAULT_TEXT_DIM,
            latent_dim: 100,
            noise_dim: 100,
            gen_filters: 64,
            disc_filters: 64,
            disc_map_size: 8,
            disc_channels: 384,
            fusion_channels: 512,
            resolution: 128,
            n_classes: 102,
            aux_dim: 0,
        }
    }
}

const CONFIG_KEYS: [&str; 11] = [
    "text_dim",
    "latent_dim",
    "noise_dim",
    "gen_filters",
    "disc_filters",
    "disc_map_size",
    "disc_channels",
    "fusion_channels",
    "resolution",
    "n_classes",
    "aux_dim",
];

impl ModelConfig {
    /// CPU-sized configuration for 32x32 images. The discriminator keeps
    /// three strided convolutions (32 -> 4); with two it is too shallow to
    /// see shape and the generator collapses.
    pub fn desk(n_classes: usize) -> Self {
        Self {
            text_dim: 64,
            latent_dim: 32,
            noise_dim: 32,
            gen_filters: 8,
            disc_filters: 16,
            disc_map_size: 4,
            disc_channels: 64,
            fusion_channels: 64,
            resolution: 32,
            n_classes,
            aux_dim: 0,
        }
    }

    /// Smallest useful configuration, sized for finite-difference checks.
    pub fn tiny(n_classes: usize) -> Self {
        Self {
            text_dim: 16,
            latent_dim: 8,
            noise_dim: 8,
            gen_filters: 4,
            disc_filters: 4,
            disc_map_size: 8,
            disc_channels: 24,
            fusion_channels: 16,
            resolution: 16,
            n_classes,
            aux_dim: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, value) in CONFIG_KEYS.iter().zip(self.values()) {
            if value == 0 && *key != "aux_dim" {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        let r = self.resolution;
        if r < 2 * GENERATOR_BASE || r % GENERATOR_BASE != 0 || !(r / GENERATOR_BASE).is_power_of_two() {
            return Err(Error::Config(format!(
                "resolution {r} must be {GENERATOR_BASE} times a power of two, at least {}",
                2 * GENERATOR_BASE
            )));
        }
        let m = self.disc_map_size;
        if r % m != 0 || !(r / m).is_power_of_two() || r / m < 2 {
            return Err(Error::Config(format!(
                "resolution {r} must be the discriminator map size {m} times a power of two of at least 2"
            )));
        }
        Ok(())
    }

    fn values(&self) -> [usize; 11] {
        [
            self.text_dim,
            self.latent_dim,
            self.noise_dim,
            self.gen_filters,
            self.disc_filters,
            self.disc_map_size,
            self.disc_channels,
            self.fusion_channels,
            self.resolution,
            self.n_classes,
            self.aux_dim,
        ]
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        CONFIG_KEYS
            .iter()
            .zip(self.values())
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    /// Reads every model key from `pairs`; other keys are ignored.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let get = |key: &str| -> Result<usize> {
            let raw = pairs
                .get(key)
                .ok_or_else(|| Error::Config(format!("missing key {key}")))?;
            raw.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected an unsigned integer, got {raw:?}")))
        };
        let cfg = Self {
            text_dim: get("text_dim")?,
            latent_dim: get("latent_dim")?,
            noise_dim: get("noise_dim")?,
            gen_filters: get("gen_filters")?,
            disc_filters: get("disc_filters")?,
            disc_map_size: get("disc_map_size")?,
            disc_channels: get("disc_channels")?,
            fusion_channels: get("fusion_channels")?,
            resolution: get("resolution")?,
            n_classes: get("n_classes")?,
            aux_dim: pairs.get("aux_dim").map_or(Ok(0), |_| get("aux_dim"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn generator_layers(&self) -> usize {
        (self.resolution / GENERATOR_BASE).trailing_zeros() as usize
    }

    pub fn discriminator_layers(&self) -> usize {
        (self.resolution / self.disc_map_size).trailing_zeros() as usize
    }

    pub fn base_channels(&self) -> usize {
        8 * self.gen_filters
    }

    /// Output channels of each transposed convolution; the last is RGB.
    pub fn generator_channels(&self) -> Vec<usize> {
        let d = self.generator_layers();
        (0..d)
            .map(|i| {
                if i + 1 == d {
                    CHANNELS
                } else {
                    (self.base_channels() >> (i + 1)).max(1)
                }
            })
            .collect()
    }

    /// Output channels of each strided convolution; the last is `disc_channels`.
    pub fn discriminator_channels(&self) -> Vec<usize> {
        let d = self.discriminator_layers();
        (0..d)
            .map(|i| {
                if i + 1 == d {
                    self.disc_channels
                } else {
                    self.disc_filters << i
                }
            })
            .collect()
    }

    /// Input width of the generator's fully connected layer.
    pub fn conditioned_dim(&self) -> usize {
        self.latent_dim + self.noise_dim
    }

    /// Analytic (height, width, channels) of every stage of a forward pass.
    pub fn shape_trace(&self) -> Vec<StageShape> {
        let mut out = vec![
            StageShape::new("g.text", 1, 1, self.latent_dim),
            StageShape::new("g.conditioned", 1, 1, self.conditioned_dim()),
            StageShape::new("g.base", GENERATOR_BASE, GENERATOR_BASE, self.base_channels()),
        ];
        let mut side = GENERATOR_BASE;
        for (i, c) in self.generator_channels().into_iter().enumerate() {
            side *= 2;
            out.push(StageShape::new(format!("g.up{i}"), side, side, c));
        }
        let mut side = self.resolution;
        for (i, c) in self.discriminator_channels().into_iter().enumerate() {
            side /= 2;
            out.push(StageShape::new(format!("d.down{i}"), side, side, c));
        }
        let m = self.disc_map_size;
        out.push(StageShape::new("d.text", m, m, self.latent_dim));
        out.push(StageShape::new("d.concat", m, m, self.disc_channels + self.latent_dim));
        out.push(StageShape::new("d.fuse", m, m, self.fusion_channels));
        out.push(StageShape::new("d.source", 1, 1, 1));
        out.push(StageShape::new("d.class", 1, 1, self.n_classes));
        if self.aux_dim > 0 {
            out.push(StageShape::new("d.aux", 1, 1, self.aux_dim));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageShape {
    pub stage: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl StageShape {
    fn new(stage: impl Into<String>, height: usize, width: usize, channels: usize) -> Self {
        Self {
            stage: stage.into(),
            height,
            width,
            channels,
        }
    }

    fn of(stage: &str, t: &Tensor) -> Self {
        match t.shape() {
            [_, c, h, w] => Self::new(stage, *h, *w, *c),
            [_, c] => Self::new(stage, 1, 1, *c),
            other => panic!("unexpected activation rank {other:?}"),
        }
    }
}

/// Learnable weights, partitioned by the network that owns them.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub generator: ParamSet,
    pub discriminator: ParamSet,
}

/// Parameters plus batch-normalization running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: NetworkParams,
    pub stats: ParamSet,
}

struct Builder<'a> {
    params: &'a mut ParamSet,
    stats: &'a mut ParamSet,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn weight(&mut self, name: &str, shape: &[usize]) {
        let t = match self.rng.as_deref_mut() {
            Some(rng) => Tensor::randn(shape, INIT_STD, rng),
            None => Tensor::zeros(shape),
        };
        self.params.insert(name, t);
    }

    fn bias(&mut self, name: &str, len: usize) {
        self.params.insert(name, Tensor::zeros(&[len]));
    }

    fn batch_norm(&mut self, prefix: &str, channels: usize) {
        let gamma = if self.rng.is_some() { 1.0 } else { 0.0 };
        self.params.insert(format!("{prefix}.gamma"), Tensor::filled(&[channels], gamma));
        self.params.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
        self.stats.insert(format!("{prefix}.mean"), Tensor::zeros(&[channels]));
        self.stats.insert(format!("{prefix}.var"), Tensor::filled(&[channels], 1.0));
    }
}

impl Model {
    /// Gaussian(0, 0.02) weights, zero biases, unit batch-norm scales.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, Some(&mut rng))
    }

    /// Every learnable array set to zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build(config, None)
    }

    fn build(config: ModelConfig, mut rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        config.validate()?;
        let mut generator = ParamSet::new();
        let mut discriminator = ParamSet::new();
        let mut stats = ParamSet::new();
        let cfg = &config;
        let k = KERNEL;

        let mut g = Builder {
            params: &mut generator,
            stats: &mut stats,
            rng: rng.as_deref_mut(),
        };
        g.weight("g.text.w", &[cfg.latent_dim, cfg.text_dim]);
        g.bias("g.text.b", cfg.latent_dim);
        let base_len = GENERATOR_BASE * GENERATOR_BASE * cfg.base_channels();
        g.weight("g.fc.w", &[base_len, cfg.conditioned_dim()]);
        g.batch_norm("g.fc_bn", cfg.base_channels());
        let channels = cfg.generator_channels();
        let mut c_in = cfg.base_channels();
        for (i, &c_out) in channels.iter().enumerate() {
            g.weight(&format!("g.up{i}.w"), &[c_in, c_out, k, k]);
            if i + 1 == channels.len() {
                g.bias(&format!("g.up{i}.b"), c_out);
            } else {
                g.batch_norm(&format!("g.up{i}_bn"), c_out);
            }
            c_in = c_out;
        }

        let mut d = Builder {
            params: &mut discriminator,
            stats: &mut stats,
            rng,
        };
        let mut c_in = CHANNELS;
        for (i, c_out) in cfg.discriminator_channels().into_iter().enumerate() {
            d.weight(&format!("d.down{i}.w"), &[c_out, c_in, k, k]);
            if i == 0 {
                d.bias("d.down0.b", c_out);
            } else {
                d.batch_norm(&format!("d.down{i}_bn"), c_out);
            }
            c_in = c_out;
        }
        d.weight("d.text.w", &[cfg.latent_dim, cfg.text_dim]);
        d.bias("d.text.b", cfg.latent_dim);
        d.weight("d.fuse.w", &[cfg.fusion_channels, cfg.disc_channels + cfg.latent_dim]);
        d.batch_norm("d.fuse_bn", cfg.fusion_channels);
        let flat = cfg.fusion_channels * cfg.disc_map_size * cfg.disc_map_size;
        d.weight("d.source.w", &[1, flat]);
        d.bias("d.source.b", 1);
        d.weight("d.class.w", &[cfg.n_classes, flat]);
        d.bias("d.class.b", cfg.n_classes);
        if cfg.aux_dim > 0 {
            d.weight("d.aux.w", &[cfg.aux_dim, flat]);
            d.bias("d.aux.b", cfg.aux_dim);
        }

        Ok(Self {
            config,
            params: NetworkParams {
                generator,
                discriminator,
            },
            stats,
        })
    }

    /// Eval-mode generation of one image.
    pub fn generate(&self, embedding: &TextEmbedding, noise: &[f64]) -> Result<Image> {
        generator_forward(self, embedding, noise)
    }

    /// Eval-mode discrimination of one image.
    pub fn discriminate(&self, image: &Image, embedding: &TextEmbedding) -> Result<DiscriminatorOutput> {
        discriminator_forward(self, image, embedding)
    }
}

/// Batch normalization uses batch statistics in `Train` and running
/// statistics in `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn batch_norm(
    params: &ParamSet,
    stats: &ParamSet,
    prefix: &str,
    x: &Tensor,
    mode: Mode,
) -> (Tensor, Option<BnCache>) {
    let gamma = params.expect(&format!("{prefix}.gamma"));
    let beta = params.expect(&format!("{prefix}.beta"));
    match mode {
        Mode::Train => {
            let (y, cache) = layers::batch_norm_train(x, gamma, beta);
            (y, Some(cache))
        }
        Mode::Eval => {
            let mean = stats.expect(&format!("{prefix}.mean"));
            let var = stats.expect(&format!("{prefix}.var"));
            (layers::batch_norm_eval(x, gamma, beta, mean, var), None)
        }
    }
}

fn check_batch(stage: &str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape().len() != expected.len() + 1 || &t.shape()[1..] != expected {
        return Err(Error::shape(stage, expected, &t.shape()[1.min(t.shape().len())..]));
    }
    Ok(())
}

/// Activations kept by a generator forward pass.
#[derive(Debug, Clone)]
pub struct GeneratorTrace {
    mode: Mode,
    embeddings: Tensor,
    text: Tensor,
    conditioned: Tensor,
    base_bn: Option<BnCache>,
    /// `acts[0]` is the rectified base map; `acts[i + 1]` the output of up-layer `i`.
    acts: Vec<Tensor>,
    up_bn: Vec<Option<BnCache>>,
}

impl GeneratorTrace {
    pub fn images(&self) -> &Tensor {
        self.acts.last().expect("at least one layer")
    }

    pub fn into_images(mut self) -> Tensor {
        self.acts.pop().expect("at least one layer")
    }

    pub fn stage_shapes(&self) -> Vec<StageShape> {
        let mut out = vec![
            StageShape::of("g.text", &self.text),
            StageShape::of("g.conditioned", &self.conditioned),
            StageShape::of("g.base", &self.acts[0]),
        ];
        for (i, a) in self.acts[1..].iter().enumerate() {
            out.push(StageShape::of(&format!("g.up{i}"), a));
        }
        out
    }

    fn bn_caches(&self) -> impl Iterator<Item = (String, &BnCache)> {
        let base = self.base_bn.as_ref().map(|c| ("g.fc_bn".to_string(), c));
        let ups = self
            .up_bn
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|c| (format!("g.up{i}_bn"), c)));
        base.into_iter().chain(ups)
    }
}

fn text_projection(params: &ParamSet, prefix: &str, embeddings: &Tensor) -> Tensor {
    let mut t = layers::linear_forward(
        embeddings,
        params.expect(&format!("{prefix}.w")),
        Some(params.expect(&format!("{prefix}.b"))),
    );
    layers::leaky_relu_inplace(&mut t);
    t
}

/// Batched generator pass. `embeddings: [N, text_dim]`, `noise: [N, noise_dim]`;
/// the images come back as `[N, 3, resolution, resolution]`.
pub fn generator_pass(
    cfg: &ModelConfig,
    params: &NetworkParams,
    stats: &ParamSet,
    embeddings: &Tensor,
    noise: &Tensor,
    mode: Mode,
) -> Result<GeneratorTrace> {
    let p = &params.generator;
    check_batch("generator text input", embeddings, &[cfg.text_dim])?;
    check_batch("generator noise input", noise, &[cfg.noise_dim])?;
    if embeddings.batch() != noise.batch() {
        return Err(Error::shape("generator batch", embeddings.batch(), noise.batch()));
    }
    let n = embeddings.batch();
    let text = text_projection(p, "g.text", embeddings);
    let conditioned = concat_features(&text, noise);

    let base = layers::linear_forward(&conditioned, p.expect("g.fc.w"), None).reshape(&[
        n,
        cfg.base_channels(),
        GENERATOR_BASE,
        GENERATOR_BASE,
    ])?;
    let (mut base, base_bn) = batch_norm(p, stats, "g.fc_bn", &base, mode);
    layers::relu_inplace(&mut base);

    let depth = cfg.generator_layers();
    let mut acts = vec![base];
    let mut up_bn = Vec::with_capacity(depth);
    for i in 0..depth {
        let input = acts.last().expect("non-empty");
        let side = input.shape()[2];
        let g = Geometry::same(side * 2, side * 2, KERNEL, STRIDE);
        let last = i + 1 == depth;
        let bias = last.then(|| p.expect(&format!("g.up{i}.b")));
        let y = layers::conv_transpose_forward(input, p.expect(&format!("g.up{i}.w")), bias, &g);
        if last {
            let mut y = y;
            layers::tanh_inplace(&mut y);
            acts.push(y);
            up_bn.push(None);
        } else {
            let (mut y, cache) = batch_norm(p, stats, &format!("g.up{i}_bn"), &y, mode);
            layers::relu_inplace(&mut y);
            acts.push(y);
            up_bn.push(cache);
        }
    }
    Ok(GeneratorTrace {
        mode,
        embeddings: embeddings.clone(),
        text,
        conditioned,
        base_bn,
        acts,
        up_bn,
    })
}

fn concat_features(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.batch();
    let (wa, wb) = (a.item_len(), b.item_len());
    let mut out = Tensor::zeros(&[n, wa + wb]);
    for i in 0..n {
        let row = out.item_mut(i);
        row[..wa].copy_from_slice(a.item(i));
        row[wa..].copy_from_slice(b.item(i));
    }
    out
}

fn add_grads(grads: &mut ParamSet, name: &str, g: Tensor) {
    let acc = grads.accum(name, g.shape());
    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += v;
    }
}

/// Gradients of the generator parameters given `d_images = dL/d(images)`.
pub fn generator_backward(cfg: &ModelConfig, params: &NetworkParams, trace: &GeneratorTrace, d_images: &Tensor) -> ParamSet {
    assert_eq!(trace.mode, Mode::Train, "backward needs a training-mode trace");
    let p = &params.generator;
    let mut grads = ParamSet::new();
    let depth = cfg.generator_layers();
    let mut d = d_images.clone();
    for i in (0..depth).rev() {
        let last = i + 1 == depth;
        if last {
            layers::tanh_backward(&trace.acts[i + 1], &mut d);
        } else {
            layers::rectifier_backward(&trace.acts[i + 1], &mut d, 0.0);
            let prefix = format!("g.up{i}_bn");
            let cache = trace.up_bn[i].as_ref().expect("training trace has caches");
            let (dx, dgamma, dbeta) = layers::batch_norm_backward(cache, p.expect(&format!("{prefix}.gamma")), &d);
            add_grads(&mut grads, &format!("{prefix}.gamma"), dgamma);
            add_grads(&mut grads, &format!("{prefix}.beta"), dbeta);
            d = dx;
        }
        let side = trace.acts[i].shape()[2];
        let g = Geometry::same(side * 2, side * 2, KERNEL, STRIDE);
        let lg = layers::conv_transpose_backward(&trace.acts[i], p.expect(&format!("g.up{i}.w")), &d, &g, last, true);
        add_grads(&mut grads, &format!("g.up{i}.w"), lg.weight);
        if let Some(db) = lg.bias {
            add_grads(&mut grads, &format!("g.up{i}.b"), db);
        }
        d = lg.input.expect("requested");
    }

    layers::rectifier_backward(&trace.acts[0], &mut d, 0.0);
    let cache = trace.base_bn.as_ref().expect("training trace has caches");
    let (dx, dgamma, dbeta) = layers::batch_norm_backward(cache, p.expect("g.fc_bn.gamma"), &d);
    add_grads(&mut grads, "g.fc_bn.gamma", dgamma);
    add_grads(&mut grads, "g.fc_bn.beta", dbeta);
    let n = dx.batch();
    let d_fc = dx.reshape(&[n, GENERATOR_BASE * GENERATOR_BASE * cfg.base_channels()]).expect("same length");
    let lg = layers::linear_backward(&trace.conditioned, p.expect("g.fc.w"), &d_fc, false, true);
    add_grads(&mut grads, "g.fc.w", lg.weight);
    let d_cond = lg.input.expect("requested");

    let mut d_text = Tensor::zeros(trace.text.shape());
    for i in 0..n {
        d_text.item_mut(i).copy_from_slice(&d_cond.item(i)[..cfg.latent_dim]);
    }
    layers::rectifier_backward(&trace.text, &mut d_text, LEAKY_SLOPE);
    let lg = layers::linear_backward(&trace.embeddings, p.expect("g.text.w"), &d_text, true, false);
    add_grads(&mut grads, "g.text.w", lg.weight);
    add_grads(&mut grads, "g.text.b", lg.bias.expect("requested"));
    grads
}

/// Pre-sigmoid outputs of the discriminator heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLogits {
    /// `[N, 1]`
    pub source: Tensor,
    /// `[N, n_classes]`
    pub class: Tensor,
    /// `[N, aux_dim]` when the auxiliary head exists.
    pub aux: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorOutput {
    pub source_prob: f64,
    /// Independent per-class sigmoids; not normalized.
    pub class_probs: Vec<f64>,
    pub aux_probs: Option<Vec<f64>>,
}

impl HeadLogits {
    pub fn outputs(&self) -> Vec<DiscriminatorOutput> {
        (0..self.source.batch())
            .map(|i| DiscriminatorOutput {
                source_prob: layers::sigmoid(self.source.item(i)[0]),
                class_probs: self.class.item(i).iter().map(|&v| layers::sigmoid(v)).collect(),
                aux_probs: self
                    .aux
                    .as_ref()
                    .map(|a| a.item(i).iter().map(|&v| layers::sigmoid(v)).collect()),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorTrace {
    mode: Mode,
    images: Tensor,
    acts: Vec<Tensor>,
    down_bn: Vec<Option<BnCache>>,
    embeddings: Tensor,
    text: Tensor,
    concat: Tensor,
    fuse_bn: Option<BnCache>,
    fused: Tensor,
    pub logits: HeadLogits,
}

impl DiscriminatorTrace {
    pub fn stage_shapes(&self) -> Vec<StageShape> {
        let mut out: Vec<StageShape> = self
            .acts
            .iter()
            .enumerate()
            .map(|(i, a)| StageShape::of(&format!("d.down{i}"), a))
            .collect();
        let m = self.concat.shape()[2];
        out.push(StageShape::new("d.text", m, m, self.text.item_len()));
        out.push(StageShape::of("d.concat", &self.concat));
        out.push(StageShape::of("d.fuse", &self.fused));
        out.push(StageShape::of("d.source", &self.logits.source));
        out.push(StageShape::of("d.class", &self.logits.class));
        if let Some(aux) = &self.logits.aux {
            out.push(StageShape::of("d.aux", aux));
        }
        out
    }

    pub fn outputs(&self) -> Vec<DiscriminatorOutput> {
        self.logits.outputs()
    }

    fn bn_caches(&self) -> impl Iterator<Item = (String, &BnCache)> {
        let downs = self
            .down_bn
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|c| (format!("d.down{i}_bn"), c)));
        downs.chain(self.fuse_bn.as_ref().map(|c| ("d.fuse_bn".to_string(), c)))
    }
}

/// Tiles `[N, L]` over an `m x m` grid as `[N, L, m, m]`.
fn tile(text: &Tensor, m: usize) -> Tensor {
    let (n, l) = (text.batch(), text.item_len());
    let mut out = Tensor::zeros(&[n, l, m, m]);
    for i in 0..n {
        let src = text.item(i).to_vec();
        let dst = out.item_mut(i);
        for (k, v) in src.iter().enumerate() {
            dst[k * m * m..(k + 1) * m * m].fill(*v);
        }
    }
    out
}

/// Copies `v` to every site of an `m x m` grid, laid out `[m, m, len]`.
pub fn replicate_spatial(v: &[f64], m: usize) -> Tensor {
    let mut data = Vec::with_capacity(m * m * v.len());
    for _ in 0..m * m {
        data.extend_from_slice(v);
    }
    Tensor::from_vec(&[m, m, v.len()], data).expect("length matches")
}

/// Batched discriminator pass over `images: [N, 3, res, res]`.
pub fn discriminator_pass(
    cfg: &ModelConfig,
    params: &NetworkParams,
    stats: &ParamSet,
    images: &Tensor,
    embeddings: &Tensor,
    mode: Mode,
) -> Result<DiscriminatorTrace> {
    let p = &params.discriminator;
    let r = cfg.resolution;
    check_batch("discriminator image input", images, &[CHANNELS, r, r])?;
    check_batch("discriminator text input", embeddings, &[cfg.text_dim])?;
    if images.batch() != embeddings.batch() {
        return Err(Error::shape("discriminator batch", images.batch(), embeddings.batch()));
    }
    let n = images.batch();
    let mut acts: Vec<Tensor> = Vec::new();
    let mut down_bn = Vec::new();
    for i in 0..cfg.discriminator_layers() {
        let input = acts.last().unwrap_or(images);
        let side = input.shape()[2];
        let g = Geometry::same(side, side, KERNEL, STRIDE);
        let w = p.expect(&format!("d.down{i}.w"));
        let y = if i == 0 {
            down_bn.push(None);
            layers::conv2d_forward(input, w, Some(p.expect("d.down0.b")), &g)
        } else {
            let y = layers::conv2d_forward(input, w, None, &g);
            let (y, cache) = batch_norm(p, stats, &format!("d.down{i}_bn"), &y, mode);
            down_bn.push(cache);
            y
        };
        let mut y = y;
        layers::leaky_relu_inplace(&mut y);
        acts.push(y);
    }
    let maps = acts.last().expect("at least one layer");
    let m = cfg.disc_map_size;
    check_batch("discriminator feature map", maps, &[cfg.disc_channels, m, m])?;

    let text = text_projection(p, "d.text", embeddings);
    let tiled = tile(&text, m);
    let (fm, tl) = (maps.item_len(), tiled.item_len());
    let mut concat = Tensor::zeros(&[n, cfg.disc_channels + cfg.latent_dim, m, m]);
    for i in 0..n {
        let dst = concat.item_mut(i);
        dst[..fm].copy_from_slice(maps.item(i));
        dst[fm..fm + tl].copy_from_slice(tiled.item(i));
    }

    let fused = layers::pointwise_forward(&concat, p.expect("d.fuse.w"), None);
    let (mut fused, fuse_bn) = batch_norm(p, stats, "d.fuse_bn", &fused, mode);
    layers::leaky_relu_inplace(&mut fused);

    let head = |name: &str| {
        layers::linear_forward(
            &fused,
            p.expect(&format!("d.{name}.w")),
            Some(p.expect(&format!("d.{name}.b"))),
        )
    };
    let logits = HeadLogits {
        source: head("source"),
        class: head("class"),
        aux: (cfg.aux_dim > 0).then(|| head("aux")),
    };
    Ok(DiscriminatorTrace {
        mode,
        images: images.clone(),
        acts,
        down_bn,
        embeddings: embeddings.clone(),
        text,
        concat,
        fuse_bn,
        fused,
        logits,
    })
}

/// Gradients of the discriminator parameters given the logit gradients,
/// plus `dL/d(images)` when `need_input` is set.
pub fn discriminator_backward(
    cfg: &ModelConfig,
    params: &NetworkParams,
    trace: &DiscriminatorTrace,
    d_logits: &HeadLogits,
    need_input: bool,
) -> (ParamSet, Option<Tensor>) {
    assert_eq!(trace.mode, Mode::Train, "backward needs a training-mode trace");
    let p = &params.discriminator;
    let mut grads = ParamSet::new();
    let mut d_fused = Tensor::zeros(trace.fused.shape());
    let mut heads = vec![("source", &d_logits.source), ("class", &d_logits.class)];
    if let Some(aux) = &d_logits.aux {
        heads.push(("aux", aux));
    }
    for (name, dy) in heads {
        let lg = layers::linear_backward(&trace.fused, p.expect(&format!("d.{name}.w")), dy, true, true);
        add_grads(&mut grads, &format!("d.{name}.w"), lg.weight);
        add_grads(&mut grads, &format!("d.{name}.b"), lg.bias.expect("requested"));
        for (a, v) in d_fused.data_mut().iter_mut().zip(lg.input.expect("requested").data()) {
            *a += v;
        }
    }

    layers::rectifier_backward(&trace.fused, &mut d_fused, LEAKY_SLOPE);
    let cache = trace.fuse_bn.as_ref().expect("training trace has caches");
    let (d_pre, dgamma, dbeta) = layers::batch_norm_backward(cache, p.expect("d.fuse_bn.gamma"), &d_fused);
    add_grads(&mut grads, "d.fuse_bn.gamma", dgamma);
    add_grads(&mut grads, "d.fuse_bn.beta", dbeta);
    let lg = layers::pointwise_backward(&trace.concat, p.expect("d.fuse.w"), &d_pre, false, true);
    add_grads(&mut grads, "d.fuse.w", lg.weight);
    let d_concat = lg.input.expect("requested");

    let n = d_concat.batch();
    let m = cfg.disc_map_size;
    let maps_shape = trace.acts.last().expect("non-empty").shape().to_vec();
    let fm = maps_shape[1..].iter().product::<usize>();
    let mut d_maps = Tensor::zeros(&maps_shape);
    let mut d_text = Tensor::zeros(trace.text.shape());
    for i in 0..n {
        let src = d_concat.item(i);
        d_maps.item_mut(i).copy_from_slice(&src[..fm]);
        for (k, acc) in d_text.item_mut(i).iter_mut().enumerate() {
            *acc = src[fm + k * m * m..fm + (k + 1) * m * m].iter().sum();
        }
    }
    layers::rectifier_backward(&trace.text, &mut d_text, LEAKY_SLOPE);
    let lg = layers::linear_backward(&trace.embeddings, p.expect("d.text.w"), &d_text, true, false);
    add_grads(&mut grads, "d.text.w", lg.weight);
    add_grads(&mut grads, "d.text.b", lg.bias.expect("requested"));

    let mut d = d_maps;
    let mut d_images = None;
    for i in (0..trace.acts.len()).rev() {
        layers::rectifier_backward(&trace.acts[i], &mut d, LEAKY_SLOPE);
        if let Some(cache) = &trace.down_bn[i] {
            let prefix = format!("d.down{i}_bn");
            let (dx, dgamma, dbeta) = layers::batch_norm_backward(cache, p.expect(&format!("{prefix}.gamma")), &d);
            add_grads(&mut grads, &format!("{prefix}.gamma"), dgamma);
            add_grads(&mut grads, &format!("{prefix}.beta"), dbeta);
            d = dx;
        }
        let input = if i == 0 { &trace.images } else { &trace.acts[i - 1] };
        let side = input.shape()[2];
        let g = Geometry::same(side, side, KERNEL, STRIDE);
        let want_input = i > 0 || need_input;
        let lg = layers::conv2d_backward(input, p.expect(&format!("d.down{i}.w")), &d, &g, i == 0, want_input);
        add_grads(&mut grads, &format!("d.down{i}.w"), lg.weight);
        if let Some(db) = lg.bias {
            add_grads(&mut grads, &format!("d.down{i}.b"), db);
        }
        match lg.input {
            Some(dx) if i > 0 => d = dx,
            dx => d_images = dx,
        }
    }
    (grads, d_images)
}

/// Folds the batch statistics of a training pass into the running averages.
pub fn update_running_stats(stats: &mut ParamSet, caches: Vec<(String, &BnCache)>, momentum: f64) {
    for (prefix, cache) in caches {
        let unbias = if cache.count > 1 {
            cache.count as f64 / (cache.count - 1) as f64
        } else {
            1.0
        };
        let mean = stats.expect_mut(&format!("{prefix}.mean"));
        for (r, b) in mean.data_mut().iter_mut().zip(&cache.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        let var = stats.expect_mut(&format!("{prefix}.var"));
        for (r, b) in var.data_mut().iter_mut().zip(&cache.var) {
            *r = (1.0 - momentum) * *r + momentum * b * unbias;
        }
    }
}

pub fn absorb_generator_stats(stats: &mut ParamSet, trace: &GeneratorTrace, momentum: f64) {
    update_running_stats(stats, trace.bn_caches().collect(), momentum);
}

pub fn absorb_discriminator_stats(stats: &mut ParamSet, trace: &DiscriminatorTrace, momentum: f64) {
    update_running_stats(stats, trace.bn_caches().collect(), momentum);
}

fn embedding_row(cfg: &ModelConfig, embedding: &TextEmbedding) -> Result<Tensor> {
    if embedding.len() != cfg.text_dim {
        return Err(Error::shape("text embedding", cfg.text_dim, embedding.len()));
    }
    Tensor::from_vec(&[1, cfg.text_dim], embedding.vector().to_vec())
}

/// Generator text projection of one embedding.
pub fn project_text_g(cfg: &ModelConfig, params: &NetworkParams, embedding: &TextEmbedding) -> Result<Vec<f64>> {
    let row = embedding_row(cfg, embedding)?;
    Ok(text_projection(&params.generator, "g.text", &row).into_data())
}

/// Discriminator text projection of one embedding.
pub fn project_text_d(cfg: &ModelConfig, params: &NetworkParams, embedding: &TextEmbedding) -> Result<Vec<f64>> {
    let row = embedding_row(cfg, embedding)?;
    Ok(text_projection(&params.discriminator, "d.text", &row).into_data())
}

/// Concatenates the text latent with a noise vector in `[-1, 1]`.
pub fn build_conditioned(latent: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = noise.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!("noise entry {v} outside [-1, 1]")));
    }
    let mut out = latent.to_vec();
    out.extend_from_slice(noise);
    Ok(out)
}

/// Output of the generator's fully connected layer for one conditioned
/// vector, reshaped to `[8 * gen_filters, 8, 8]` (before normalization).
pub fn project_conditioned(cfg: &ModelConfig, params: &NetworkParams, conditioned: &[f64]) -> Result<Tensor> {
    if conditioned.len() != cfg.conditioned_dim() {
        return Err(Error::shape("conditioned vector", cfg.conditioned_dim(), conditioned.len()));
    }
    let x = Tensor::from_vec(&[1, conditioned.len()], conditioned.to_vec())?;
    layers::linear_forward(&x, params.generator.expect("g.fc.w"), None).reshape(&[
        cfg.base_channels(),
        GENERATOR_BASE,
        GENERATOR_BASE,
    ])
}

pub fn generator_forward(model: &Model, embedding: &TextEmbedding, noise: &[f64]) -> Result<Image> {
    let cfg = &model.config;
    let row = embedding_row(cfg, embedding)?;
    if noise.len() != cfg.noise_dim {
        return Err(Error::shape("noise vector", cfg.noise_dim, noise.len()));
    }
    let z = Tensor::from_vec(&[1, cfg.noise_dim], noise.to_vec())?;
    let trace = generator_pass(cfg, &model.params, &model.stats, &row, &z, Mode::Eval)?;
    Ok(batch_to_images(trace.images()).remove(0))
}

pub fn discriminator_forward(model: &Model, image: &Image, embedding: &TextEmbedding) -> Result<DiscriminatorOutput> {
    let cfg = &model.config;
    let row = embedding_row(cfg, embedding)?;
    let r = cfg.resolution;
    if image.height() != r || image.width() != r {
        return Err(Error::shape("discriminator image", (r, r), (image.height(), image.width())));
    }
    let batch = images_to_batch(&[image])?;
    let trace = discriminator_pass(cfg, &model.params, &model.stats, &batch, &row, Mode::Eval)?;
    Ok(trace.outputs().remove(0))
}
