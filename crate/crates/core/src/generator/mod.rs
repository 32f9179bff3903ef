//! SPADE-modulated generator, multi-scale discriminator, the conditional GAN
//! objectives and a desk-scale training loop.
//!
//! Everything here is a pure function of its inputs and weights: the
//! generator takes no noise input.

mod objective;
mod train;

pub use objective::{gan_objective, LossReport, LossTerm, Variant};
pub use train::{
    sampled_grad_check, toy_pair, toy_train, Component, GradCheckSummary, ToyPair, TrainConfig, TrainMode, TrainOutcome, TrainReport,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::FusionError;
use crate::layout::LayoutError;
use crate::params::ParamGroup;
use crate::tensor::{ConvParams, GradTape, KernelError, Tensor, Var, DEFAULT_EPSILON, KERNEL};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{term} score {value} at scale {scale}, index {index} is outside (0, 1)")]
    Domain {
        term: &'static str,
        scale: usize,
        index: usize,
        value: f64,
    },
    #[error("variant {variant}: {detail}")]
    Variant { variant: Variant, detail: String },
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error("gradient check: {0}")]
    GradCheck(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

pub type Result<T, E = GeneratorError> = std::result::Result<T, E>;

/// Uniform in `±sqrt(3 / fan_in)`, unit output variance for unit inputs.
fn fan_in_conv(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (3.0 / (KERNEL * KERNEL * cin) as f64).sqrt();
    Tensor::uniform(&[KERNEL, KERNEL, cin, cout], -bound, bound, rng)
}

fn scaled_conv(cin: usize, cout: usize, scale: f64, rng: &mut ChaCha8Rng) -> ConvParams {
    let mut weight = fan_in_conv(cin, cout, rng);
    weight.data_mut().iter_mut().for_each(|w| *w *= scale);
    ConvParams {
        weight,
        bias: Tensor::zeros(&[cout]),
    }
}

type Named<'a> = Vec<(String, &'a Tensor)>;
type NamedMut<'a> = Vec<(String, &'a mut Tensor)>;

fn push_conv<'a>(out: &mut Named<'a>, prefix: &str, p: &'a ConvParams) {
    out.push((format!("{prefix}.weight"), &p.weight));
    out.push((format!("{prefix}.bias"), &p.bias));
}

fn push_conv_mut<'a>(out: &mut NamedMut<'a>, prefix: &str, p: &'a mut ConvParams) {
    out.push((format!("{prefix}.weight"), &mut p.weight));
    out.push((format!("{prefix}.bias"), &mut p.bias));
}

/// Copies every named tensor of `group` into `targets`, checking names and shapes.
fn fill_from_group(targets: NamedMut<'_>, group: &ParamGroup) -> Result<()> {
    for (name, t) in targets {
        let src = group.get(&name)?;
        if src.shape() != t.shape() {
            return Err(KernelError::Shape {
                op: "load_params",
                expected: t.shape().to_vec(),
                actual: src.shape().to_vec(),
            }
            .into());
        }
        *t = src.clone();
    }
    Ok(())
}

fn to_group<C: Serialize>(config: &C, named: Named<'_>) -> ParamGroup {
    ParamGroup {
        config: serde_json::to_value(config).expect("config serializes"),
        tensors: named.into_iter().map(|(n, t)| (n, t.clone())).collect(),
    }
}

/// Binds `tensors` on `tape`; positions listed in `trainable` reuse the given
/// vars, all others become constants.
pub fn bind_mixed(tape: &mut GradTape, tensors: &[&Tensor], trainable: &[(usize, Var)]) -> Vec<Var> {
    tensors
        .iter()
        .enumerate()
        .map(|(i, t)| match trainable.iter().find(|(k, _)| *k == i) {
            Some(&(_, v)) => v,
            None => tape.constant((*t).clone()),
        })
        .collect()
}

pub fn bind_all(tape: &mut GradTape, tensors: &[&Tensor], trainable: bool) -> Vec<Var> {
    tensors
        .iter()
        .map(|t| {
            if trainable {
                tape.param((*t).clone())
            } else {
                tape.constant((*t).clone())
            }
        })
        .collect()
}

fn take(vars: &mut impl Iterator<Item = Var>) -> Var {
    vars.next().expect("one var per weight tensor")
}

// ---------------------------------------------------------------- SPADE

/// Modulation nets: `γ` and `β`, each one 3x3 convolution from the condition
/// channels to the activation channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SpadeParams {
    pub gamma: ConvParams,
    pub beta: ConvParams,
}

impl SpadeParams {
    /// `γ ≡ 1`, `β ≡ 0`.
    pub fn identity(cond_channels: usize, channels: usize) -> Self {
        let mut gamma = ConvParams::zeros(cond_channels, channels);
        gamma.bias.data_mut().fill(1.0);
        Self {
            gamma,
            beta: ConvParams::zeros(cond_channels, channels),
        }
    }

    /// Identity modulation plus a small seeded perturbation of the weights.
    pub fn seeded(cond_channels: usize, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::identity(cond_channels, channels);
        p.gamma.weight = scaled_conv(cond_channels, channels, 0.1, rng).weight;
        p.beta.weight = scaled_conv(cond_channels, channels, 0.1, rng).weight;
        p
    }

    pub fn channels(&self) -> usize {
        self.gamma.out_channels()
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Named<'a>) {
        push_conv(out, &format!("{prefix}.gamma"), &self.gamma);
        push_conv(out, &format!("{prefix}.beta"), &self.beta);
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a>) {
        push_conv_mut(out, &format!("{prefix}.gamma"), &mut self.gamma);
        push_conv_mut(out, &format!("{prefix}.beta"), &mut self.beta);
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        self.named("spade", &mut v);
        v.into_iter().map(|(_, t)| t).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SpadeVars {
    pub gamma_w: Var,
    pub gamma_b: Var,
    pub beta_w: Var,
    pub beta_b: Var,
}

impl SpadeVars {
    pub fn from_iter(vars: &mut impl Iterator<Item = Var>) -> Self {
        Self {
            gamma_w: take(vars),
            gamma_b: take(vars),
            beta_w: take(vars),
            beta_b: take(vars),
        }
    }
}

/// `normalize(h) * γ(cond) + β(cond)`, with `cond` nearest-resized to `h`.
pub fn spade_graph(tape: &mut GradTape, h: Var, cond: Var, p: SpadeVars, epsilon: f64) -> Result<Var, KernelError> {
    let (hh, hw, ch) = tape.value(h).hwc()?;
    for w in [p.gamma_w, p.beta_w] {
        let cout = tape.shape(w).last().copied().unwrap_or(0);
        if cout != ch {
            return Err(KernelError::Shape {
                op: "spade_layer",
                expected: vec![hh, hw, cout],
                actual: tape.shape(h).to_vec(),
            });
        }
    }
    let (ch_, cw, _) = tape.value(cond).hwc()?;
    let cond = if (ch_, cw) == (hh, hw) {
        cond
    } else {
        tape.nearest_resize(cond, hh, hw)?
    };
    let n = tape.channel_normalize(h, epsilon)?;
    let gamma = tape.conv2d(cond, p.gamma_w, Some(p.gamma_b))?;
    let beta = tape.conv2d(cond, p.beta_w, Some(p.beta_b))?;
    let scaled = tape.mul(n, gamma)?;
    tape.add(scaled, beta)
}

pub fn spade_layer(h: &Tensor, condition: &Tensor, params: &SpadeParams, epsilon: f64) -> Result<Tensor, KernelError> {
    let mut tape = GradTape::new();
    let hv = tape.constant(h.clone());
    let cv = tape.constant(condition.clone());
    let vars = SpadeVars::from_iter(&mut bind_all(&mut tape, &params.tensors(), false).into_iter());
    let out = spade_graph(&mut tape, hv, cv, vars, epsilon)?;
    Ok(tape.value(out).clone())
}

// ---------------------------------------------------------------- generator

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Channels of the conditioning feature map.
    pub cond_channels: usize,
    pub channels: usize,
    pub blocks: usize,
    /// The first `upsamples` blocks are each followed by a 2x nearest upsample.
    pub upsamples: usize,
    pub epsilon: f64,
}

impl GeneratorConfig {
    pub fn new(cond_channels: usize) -> Self {
        Self {
            cond_channels,
            channels: 16,
            blocks: 2,
            upsamples: 1,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cond_channels == 0 || self.channels == 0 {
            return Err(GeneratorError::Config("channel counts must be positive".into()));
        }
        if self.upsamples > self.blocks {
            return Err(GeneratorError::Config(format!(
                "{} upsamples need at least as many blocks, got {}",
                self.upsamples, self.blocks
            )));
        }
        Ok(())
    }

    /// Spatial reduction of the generator input relative to the output.
    pub fn scale(&self) -> usize {
        1 << self.upsamples
    }

    pub fn upsample_after(&self, block: usize) -> usize {
        if block < self.upsamples {
            2
        } else {
            1
        }
    }
}

/// Two SPADE layers, two convolutions and an identity skip.
/// `conv1` feeds a normalization, so it carries no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub spade1: SpadeParams,
    pub conv1: Tensor,
    pub spade2: SpadeParams,
    pub conv2: ConvParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorWeights {
    pub config: GeneratorConfig,
    pub conv_in: ConvParams,
    pub blocks: Vec<ResBlock>,
    pub conv_out: ConvParams,
}

impl GeneratorWeights {
    pub fn seeded(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, c) = (config.cond_channels, config.channels);
        let conv_in = scaled_conv(k, c, 1.0, &mut rng);
        let blocks = (0..config.blocks)
            .map(|_| ResBlock {
                spade1: SpadeParams::seeded(k, c, &mut rng),
                conv1: fan_in_conv(c, c, &mut rng),
                spade2: SpadeParams::seeded(k, c, &mut rng),
                conv2: scaled_conv(c, c, 0.5, &mut rng),
            })
            .collect();
        let conv_out = scaled_conv(c, 3, 1.0, &mut rng);
        Ok(Self {
            config,
            conv_in,
            blocks,
            conv_out,
        })
    }

    pub fn named(&self) -> Named<'_> {
        let mut out = Vec::new();
        push_conv(&mut out, "conv_in", &self.conv_in);
        for (i, b) in self.blocks.iter().enumerate() {
            b.spade1.named(&format!("block{i}.spade1"), &mut out);
            out.push((format!("block{i}.conv1.weight"), &b.conv1));
            b.spade2.named(&format!("block{i}.spade2"), &mut out);
            push_conv(&mut out, &format!("block{i}.conv2"), &b.conv2);
        }
        push_conv(&mut out, "conv_out", &self.conv_out);
        out
    }

    pub fn named_mut(&mut self) -> NamedMut<'_> {
        let mut out = Vec::new();
        push_conv_mut(&mut out, "conv_in", &mut self.conv_in);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.spade1.named_mut(&format!("block{i}.spade1"), &mut out);
            out.push((format!("block{i}.conv1.weight"), &mut b.conv1));
            b.spade2.named_mut(&format!("block{i}.spade2"), &mut out);
            push_conv_mut(&mut out, &format!("block{i}.conv2"), &mut b.conv2);
        }
        push_conv_mut(&mut out, "conv_out", &mut self.conv_out);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.named_mut().into_iter().map(|(_, t)| t).collect()
    }

    pub fn to_group(&self) -> ParamGroup {
        to_group(&self.config, self.named())
    }

    pub fn from_group(group: &ParamGroup) -> Result<Self> {
        let config: GeneratorConfig = group.config()?;
        let mut w = Self::seeded(config, 0)?;
        fill_from_group(w.named_mut(), group)?;
        Ok(w)
    }
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub spade1: SpadeVars,
    pub conv1: Var,
    pub spade2: SpadeVars,
    pub conv2_w: Var,
    pub conv2_b: Var,
}

#[derive(Debug, Clone)]
pub struct GeneratorVars {
    pub conv_in_w: Var,
    pub conv_in_b: Var,
    pub blocks: Vec<BlockVars>,
    pub conv_out_w: Var,
    pub conv_out_b: Var,
}

impl GeneratorVars {
    /// Consumes vars in [`GeneratorWeights::tensors`] order.
    pub fn from_iter(config: &GeneratorConfig, vars: &mut impl Iterator<Item = Var>) -> Self {
        let conv_in_w = take(vars);
        let conv_in_b = take(vars);
        let blocks = (0..config.blocks)
            .map(|_| BlockVars {
                spade1: SpadeVars::from_iter(vars),
                conv1: take(vars),
                spade2: SpadeVars::from_iter(vars),
                conv2_w: take(vars),
                conv2_b: take(vars),
            })
            .collect();
        Self {
            conv_in_w,
            conv_in_b,
            blocks,
            conv_out_w: take(vars),
            conv_out_b: take(vars),
        }
    }
}

/// Records `G(m̂)` on `tape`. The output has `cond`'s spatial extents and 3
/// channels in `[-1, 1]`.
pub fn generator_graph(tape: &mut GradTape, cond: Var, v: &GeneratorVars, config: &GeneratorConfig) -> Result<Var, KernelError> {
    let (h, w, k) = tape.value(cond).hwc()?;
    let scale = config.scale();
    if k != config.cond_channels || h % scale != 0 || w % scale != 0 || h < scale || w < scale {
        return Err(KernelError::Shape {
            op: "generate",
            expected: vec![scale * (h / scale).max(1), scale * (w / scale).max(1), config.cond_channels],
            actual: vec![h, w, k],
        });
    }
    let x0 = tape.nearest_resize(cond, h / scale, w / scale)?;
    let mut x = tape.conv2d(x0, v.conv_in_w, Some(v.conv_in_b))?;
    for (i, b) in v.blocks.iter().enumerate() {
        let s = spade_graph(tape, x, cond, b.spade1, config.epsilon)?;
        let a = tape.relu(s)?;
        let r = tape.conv2d(a, b.conv1, None)?;
        let s = spade_graph(tape, r, cond, b.spade2, config.epsilon)?;
        let a = tape.relu(s)?;
        let r = tape.conv2d(a, b.conv2_w, Some(b.conv2_b))?;
        x = tape.add(x, r)?;
        let f = config.upsample_after(i);
        if f > 1 {
            x = tape.nearest_upsample(x, f)?;
        }
    }
    let a = tape.relu(x)?;
    let y = tape.conv2d(a, v.conv_out_w, Some(v.conv_out_b))?;
    tape.tanh(y)
}

pub fn generate(feature: &Tensor, weights: &GeneratorWeights) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let cond = tape.constant(feature.clone());
    let vars = GeneratorVars::from_iter(&weights.config, &mut bind_all(&mut tape, &weights.tensors(), false).into_iter());
    let out = generator_graph(&mut tape, cond, &vars, &weights.config)?;
    Ok(tape.value(out).clone())
}

// ---------------------------------------------------------------- discriminator

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Image channels plus condition channels.
    pub in_channels: usize,
    pub channels: usize,
    pub scales: usize,
    /// Convolutions per scale, at least 2.
    pub layers: usize,
    pub epsilon: f64,
}

impl DiscriminatorConfig {
    pub fn new(cond_channels: usize) -> Self {
        Self {
            in_channels: 3 + cond_channels,
            channels: 16,
            scales: 2,
            layers: 3,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 || self.scales == 0 || self.channels == 0 || self.in_channels == 0 {
            return Err(GeneratorError::Config(format!(
                "discriminator needs at least 2 layers and 1 scale, got {} and {}",
                self.layers, self.scales
            )));
        }
        Ok(())
    }
}

/// One scale: `conv + relu`, then `layers - 2` times `conv (no bias) +
/// normalize + relu`, then a 1-channel conv producing logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorScale {
    pub first: ConvParams,
    pub middle: Vec<Tensor>,
    pub last: ConvParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorWeights {
    pub config: DiscriminatorConfig,
    pub scales: Vec<DiscriminatorScale>,
}

impl DiscriminatorWeights {
    pub fn seeded(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let scales = (0..config.scales)
            .map(|_| DiscriminatorScale {
                first: scaled_conv(config.in_channels, c, 1.0, &mut rng),
                middle: (2..config.layers).map(|_| fan_in_conv(c, c, &mut rng)).collect(),
                last: scaled_conv(c, 1, 1.0, &mut rng),
            })
            .collect();
        Ok(Self { config, scales })
    }

    pub fn zeros(config: DiscriminatorConfig) -> Result<Self> {
        let mut w = Self::seeded(config, 0)?;
        w.tensors_mut().into_iter().for_each(|t| t.data_mut().fill(0.0));
        Ok(w)
    }

    pub fn named(&self) -> Named<'_> {
        let mut out = Vec::new();
        for (s, sc) in self.scales.iter().enumerate() {
            push_conv(&mut out, &format!("scale{s}.first"), &sc.first);
            for (l, m) in sc.middle.iter().enumerate() {
                out.push((format!("scale{s}.middle{l}.weight"), m));
            }
            push_conv(&mut out, &format!("scale{s}.last"), &sc.last);
        }
        out
    }

    pub fn named_mut(&mut self) -> NamedMut<'_> {
        let mut out = Vec::new();
        for (s, sc) in self.scales.iter_mut().enumerate() {
            push_conv_mut(&mut out, &format!("scale{s}.first"), &mut sc.first);
            for (l, m) in sc.middle.iter_mut().enumerate() {
                out.push((format!("scale{s}.middle{l}.weight"), m));
            }
            push_conv_mut(&mut out, &format!("scale{s}.last"), &mut sc.last);
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.named_mut().into_iter().map(|(_, t)| t).collect()
    }

    pub fn to_group(&self) -> ParamGroup {
        to_group(&self.config, self.named())
    }

    pub fn from_group(group: &ParamGroup) -> Result<Self> {
        let config: DiscriminatorConfig = group.config()?;
        let mut w = Self::seeded(config, 0)?;
        fill_from_group(w.named_mut(), group)?;
        Ok(w)
    }
}

#[derive(Debug, Clone)]
pub struct ScaleVars {
    pub first_w: Var,
    pub first_b: Var,
    pub middle: Vec<Var>,
    pub last_w: Var,
    pub last_b: Var,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorVars {
    pub scales: Vec<ScaleVars>,
}

impl DiscriminatorVars {
    pub fn from_iter(config: &DiscriminatorConfig, vars: &mut impl Iterator<Item = Var>) -> Self {
        let scales = (0..config.scales)
            .map(|_| ScaleVars {
                first_w: take(vars),
                first_b: take(vars),
                middle: (2..config.layers).map(|_| take(vars)).collect(),
                last_w: take(vars),
                last_b: take(vars),
            })
            .collect();
        Self { scales }
    }
}

/// Per-scale logit maps for `D(condition, image)`. Scale `s` sees the inputs
/// average-pooled `s` times.
pub fn discriminator_graph(
    tape: &mut GradTape,
    image: Var,
    condition: Var,
    v: &DiscriminatorVars,
    config: &DiscriminatorConfig,
) -> Result<Vec<Var>, KernelError> {
    let (ih, iw, _) = tape.value(image).hwc()?;
    let (ch, cw, cc) = tape.value(condition).hwc()?;
    if (ih, iw) != (ch, cw) {
        return Err(KernelError::Shape {
            op: "discriminate",
            expected: vec![ih, iw, cc],
            actual: vec![ch, cw, cc],
        });
    }
    let mut x = tape.concat_channels(&[image, condition])?;
    let mut maps = Vec::with_capacity(v.scales.len());
    for (s, sv) in v.scales.iter().enumerate() {
        if s > 0 {
            x = tape.avg_pool2(x)?;
        }
        let y = tape.conv2d(x, sv.first_w, Some(sv.first_b))?;
        let mut y = tape.relu(y)?;
        for &m in &sv.middle {
            let z = tape.conv2d(y, m, None)?;
            let z = tape.channel_normalize(z, config.epsilon)?;
            y = tape.relu(z)?;
        }
        maps.push(tape.conv2d(y, sv.last_w, Some(sv.last_b))?);
    }
    Ok(maps)
}

pub fn discriminate_logits(image: &Tensor, condition: &Tensor, weights: &DiscriminatorWeights) -> Result<Vec<Tensor>> {
    let mut tape = GradTape::new();
    let iv = tape.constant(image.clone());
    let cv = tape.constant(condition.clone());
    let vars = DiscriminatorVars::from_iter(&weights.config, &mut bind_all(&mut tape, &weights.tensors(), false).into_iter());
    let maps = discriminator_graph(&mut tape, iv, cv, &vars, &weights.config)?;
    Ok(maps.into_iter().map(|m| tape.value(m).clone()).collect())
}

/// Per-scale score maps in `(0, 1)`.
pub fn discriminate(image: &Tensor, condition: &Tensor, weights: &DiscriminatorWeights) -> Result<Vec<Tensor>> {
    let mut tape = GradTape::new();
    let iv = tape.constant(image.clone());
    let cv = tape.constant(condition.clone());
    let vars = DiscriminatorVars::from_iter(&weights.config, &mut bind_all(&mut tape, &weights.tensors(), false).into_iter());
    let maps = discriminator_graph(&mut tape, iv, cv, &vars, &weights.config)?;
    let mut out = Vec::with_capacity(maps.len());
    for m in maps {
        let s = tape.sigmoid(m)?;
        out.push(tape.value(s).clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
