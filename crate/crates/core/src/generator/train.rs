//! Desk-scale training: fusion and generator overfit one synthetic pair,
//! either by L1 reconstruction or adversarially against the multi-scale
//! discriminator with the `bach` objective.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    bind_all, bind_mixed, discriminator_graph, generator_graph, DiscriminatorConfig, DiscriminatorVars, DiscriminatorWeights,
    GeneratorConfig, GeneratorError, GeneratorVars, GeneratorWeights, Result,
};
use crate::bank::split_background;
use crate::bank::synth::{random_layout, random_segmap, toy_taxonomy};
use crate::fusion::{compose_label_map, fusion_graph, pad_query, ComposedLabelMap, FusionParams, FusionVars};
use crate::layout::{rasterize_layout, Canvas};
use crate::tensor::{grad_check_with, Adam, GradTape, KernelError, Tensor, Var};

pub const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
const CROP: usize = 8;
// the sign-pattern check in grad_check_with guards the kinks; this only
// rejects points sitting on one
const CHECK_MARGIN: f64 = 1e-6;
const MAX_ATTEMPTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Recon,
    Adv,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Recon => "recon",
            TrainMode::Adv => "adv",
        })
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "recon" => Ok(TrainMode::Recon),
            "adv" => Ok(TrainMode::Adv),
            _ => Err(format!("unknown mode {s:?} (recon, adv)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    /// Side of the square training canvas, at most 32.
    pub size: usize,
    pub c_o: usize,
    pub c_b: usize,
    /// Retrieved maps fed to fusion.
    pub retrieved: usize,
    pub fusion_steps: usize,
    pub channels: usize,
    pub blocks: usize,
    pub upsamples: usize,
    pub grad_check: bool,
    /// Most coordinates finite-differenced by the per-run gradient check.
    pub grad_budget: usize,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, steps: usize, seed: u64) -> Self {
        Self {
            mode,
            steps,
            seed,
            lr: 5e-3,
            size: 16,
            c_o: 3,
            c_b: 3,
            retrieved: 2,
            fusion_steps: 3,
            channels: 16,
            blocks: 2,
            upsamples: 1,
            grad_check: true,
            grad_budget: 1000,
        }
    }

    pub fn k(&self) -> usize {
        self.c_o + self.c_b
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            channels: self.channels,
            blocks: self.blocks,
            upsamples: self.upsamples,
            ..GeneratorConfig::new(self.k())
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            channels: self.channels,
            ..DiscriminatorConfig::new(self.k())
        }
    }

    fn validate(&self) -> Result<()> {
        let scale = 1 << self.upsamples;
        if self.size > 32 || self.size < CROP || self.size % scale != 0 || CROP % scale != 0 {
            return Err(GeneratorError::Config(format!(
                "canvas side {} must be in {CROP}..=32 and divisible by {scale}",
                self.size
            )));
        }
        if self.c_o == 0 || self.c_b == 0 || self.retrieved == 0 {
            return Err(GeneratorError::Config("need foreground, background and retrieved maps".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(GeneratorError::Config(format!("learning rate {}", self.lr)));
        }
        self.generator().validate()
    }
}

/// One synthetic training example: padded query, retrieved composed maps
/// and an RGB target in `[-0.7, 0.7]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPair {
    pub query: ComposedLabelMap,
    pub retrieved: Vec<ComposedLabelMap>,
    pub target: Tensor,
}

fn channel_color(channel: usize) -> [f64; 3] {
    let a = 2.4 * channel as f64;
    [0.7 * a.cos(), 0.7 * (a + 2.1).cos(), 0.7 * (a + 4.2).cos()]
}

/// Foreground pixels take the color of their first occupied category;
/// elsewhere the color is the mean over retrieved backgrounds, so the target
/// is a function of what fusion sees.
pub fn toy_pair(size: usize, c_o: usize, c_b: usize, retrieved: usize, seed: u64) -> Result<ToyPair> {
    let taxonomy = toy_taxonomy(c_o, c_b);
    let canvas = Canvas::new(size, size);
    let layout = random_layout(&taxonomy, canvas, seed, 3);
    let fg = rasterize_layout(&layout, &taxonomy)?;
    let query = pad_query(&fg, c_b)?;
    let mut maps = Vec::with_capacity(retrieved);
    for i in 0..retrieved as u64 {
        let seg = random_segmap(&taxonomy, canvas, seed.wrapping_mul(31).wrapping_add(i + 1), 4);
        let bg = split_background(&seg, &taxonomy).map_err(|e| GeneratorError::Config(e.to_string()))?;
        maps.push(compose_label_map(&bg, &fg)?);
    }
    let mut target = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        for c in 0..size {
            let color = match fg.pixel(r, c).iter().position(|&v| v > 0) {
                Some(j) => channel_color(c_b + j),
                None => {
                    let mut acc = [0.0; 3];
                    for m in &maps {
                        let j = m.map().pixel(r, c)[..c_b].iter().position(|&v| v > 0).unwrap_or(0);
                        let col = channel_color(j);
                        (0..3).for_each(|i| acc[i] += col[i] / maps.len() as f64);
                    }
                    acc
                }
            };
            target.extend_from_slice(&color);
        }
    }
    Ok(ToyPair {
        query,
        retrieved: maps,
        target: Tensor::new(&[size, size, 3], target)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Fusion,
    Generator,
    Spade,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckSummary {
    pub component: Component,
    pub tensors: Vec<String>,
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub relu_margin: f64,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    /// Recon: L1 before each update. Adv: generator term before each update.
    pub losses: Vec<f64>,
    /// Adv only: discriminator objective before each update.
    pub discriminator: Vec<f64>,
    pub initial_loss: f64,
    /// Loss after the last update.
    pub final_loss: f64,
    /// `1 - final / initial`.
    pub reduction: f64,
    pub grad_check: Option<GradCheckSummary>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub pair: ToyPair,
    pub fusion: FusionParams,
    pub generator: GeneratorWeights,
    pub discriminator: Option<DiscriminatorWeights>,
    /// `G(m̂)` with the final weights.
    pub output: Tensor,
}

struct Model {
    fusion: FusionParams,
    generator: GeneratorWeights,
    discriminator: DiscriminatorWeights,
}

impl Model {
    fn names(&self) -> Vec<String> {
        let fusion = ["fusion.f.weight", "fusion.f.bias", "fusion.m.weight", "fusion.m.bias"].map(String::from);
        let generator = self.generator.named().into_iter().map(|(n, _)| format!("generator.{n}"));
        let disc = self.discriminator.named().into_iter().map(|(n, _)| format!("discriminator.{n}"));
        fusion.into_iter().chain(generator).chain(disc).collect()
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.fusion.tensors();
        v.extend(self.generator.tensors());
        v.extend(self.discriminator.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.fusion.tensors_mut();
        v.extend(self.generator.tensors_mut());
        v.extend(self.discriminator.tensors_mut());
        v
    }

    /// Index range of fusion plus generator tensors, then of the discriminator.
    fn split(&self) -> usize {
        4 + self.generator.tensors().len()
    }
}

struct Inputs {
    query: Tensor,
    retrieved: Vec<Tensor>,
    target: Tensor,
}

impl Inputs {
    fn from_pair(pair: &ToyPair) -> Self {
        Self {
            query: pair.query.to_tensor(),
            retrieved: pair.retrieved.iter().map(|m| m.to_tensor()).collect(),
            target: pair.target.clone(),
        }
    }

    fn crop(&self, row: usize, col: usize, side: usize) -> Result<Self, KernelError> {
        Ok(Self {
            query: crop(&self.query, row, col, side)?,
            retrieved: self.retrieved.iter().map(|t| crop(t, row, col, side)).collect::<Result<_, _>>()?,
            target: crop(&self.target, row, col, side)?,
        })
    }

    /// Adds uniform noise in `±amount` to the label maps.
    fn jitter(mut self, amount: f64, rng: &mut ChaCha8Rng) -> Self {
        for t in std::iter::once(&mut self.query).chain(self.retrieved.iter_mut()) {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-amount..amount));
        }
        self
    }
}

fn crop(t: &Tensor, row: usize, col: usize, side: usize) -> Result<Tensor, KernelError> {
    let (_, w, c) = t.hwc()?;
    let mut data = Vec::with_capacity(side * side * c);
    for r in row..row + side {
        let start = (r * w + col) * c;
        data.extend_from_slice(&t.data()[start..start + side * c]);
    }
    Tensor::new(&[side, side, c], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Loss {
    Recon,
    /// Negated discriminator objective.
    Discriminator,
    /// Generator term.
    Generator,
}

struct Forward {
    loss: Var,
    fake: Var,
    /// Discriminator objective, adversarial losses only.
    objective: Option<Var>,
}

/// `(1/S) Σ_s mean(log_sigmoid(±z_s))`.
fn scale_mean(tape: &mut GradTape, maps: &[Var], sign: f64) -> Result<Var, KernelError> {
    let mut acc: Option<Var> = None;
    for &z in maps {
        let z = if sign < 0.0 { tape.affine(z, -1.0, 0.0)? } else { z };
        let l = tape.log_sigmoid(z)?;
        let m = tape.mean(l)?;
        acc = Some(match acc {
            None => m,
            Some(a) => tape.add(a, m)?,
        });
    }
    let total = acc.ok_or(KernelError::EmptyGroup { op: "scale_mean" })?;
    tape.affine(total, 1.0 / maps.len() as f64, 0.0)
}

fn forward(tape: &mut GradTape, inputs: &Inputs, vars: &[Var], model: &Model, loss: Loss) -> Result<Forward, KernelError> {
    let mut it = vars.iter().copied();
    let fv = FusionVars::from_iter(&mut it);
    let gv = GeneratorVars::from_iter(&model.generator.config, &mut it);
    let q = tape.constant(inputs.query.clone());
    let rs: Vec<Var> = inputs.retrieved.iter().map(|t| tape.constant(t.clone())).collect();
    let fused = fusion_graph(tape, q, &rs, fv, model.fusion.steps)?;
    let fake = generator_graph(tape, fused, &gv, &model.generator.config)?;
    let target = tape.constant(inputs.target.clone());
    if loss == Loss::Recon {
        let d = tape.sub(fake, target)?;
        let a = tape.abs(d)?;
        return Ok(Forward {
            loss: tape.mean(a)?,
            fake,
            objective: None,
        });
    }
    let dv = DiscriminatorVars::from_iter(&model.discriminator.config, &mut it);
    let dcfg = model.discriminator.config;
    let real_maps = discriminator_graph(tape, target, fused, &dv, &dcfg)?;
    let fake_maps = discriminator_graph(tape, fake, fused, &dv, &dcfg)?;
    let real = scale_mean(tape, &real_maps, 1.0)?;
    let fake_term = scale_mean(tape, &fake_maps, -1.0)?;
    let objective = tape.add(real, fake_term)?;
    let loss = match loss {
        Loss::Discriminator => tape.affine(objective, -1.0, 0.0)?,
        _ => fake_term,
    };
    Ok(Forward {
        loss,
        fake,
        objective: Some(objective),
    })
}

fn candidates(model: &Model, component: Component, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let split = model.split();
    let names = model.names();
    let block = rng.random_range(0..model.generator.config.blocks.max(1));
    let spade = |n: &str| n.contains(".spade");
    (0..names.len())
        .filter(|&i| {
            let n = &names[i];
            match component {
                Component::Fusion => i < 4,
                Component::Generator => (4..split).contains(&i) && !spade(n),
                Component::Spade => n.starts_with(&format!("generator.block{block}.spade")),
                Component::Discriminator => i >= split,
            }
        })
        .collect()
}

/// Finite-difference check of the training loss on a random crop, with
/// respect to a random subset of one component's tensors (at most `budget`
/// coordinates). The loss is the one `mode` trains that component with.
/// Crops whose relu inputs come too close to zero are retried, with the
/// label maps jittered after the first attempt.
pub fn sampled_grad_check(
    mode: TrainMode,
    pair: &ToyPair,
    fusion: &FusionParams,
    generator: &GeneratorWeights,
    discriminator: Option<&DiscriminatorWeights>,
    budget: usize,
    seed: u64,
) -> Result<GradCheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let disc = match discriminator {
        Some(d) => d.clone(),
        None => DiscriminatorWeights::zeros(DiscriminatorConfig::new(generator.config.cond_channels))?,
    };
    let model = Model {
        fusion: fusion.clone(),
        generator: generator.clone(),
        discriminator: disc,
    };
    let mut components = vec![Component::Fusion, Component::Generator, Component::Spade];
    if mode == TrainMode::Adv {
        components.push(Component::Discriminator);
    }
    let component = components[rng.random_range(0..components.len())];
    let loss = match (mode, component) {
        (TrainMode::Recon, _) => Loss::Recon,
        (TrainMode::Adv, Component::Discriminator) => Loss::Discriminator,
        (TrainMode::Adv, _) => Loss::Generator,
    };

    let all = model.tensors();
    let names = model.names();
    let mut pool = candidates(&model, component, &mut rng);
    pool.shuffle(&mut rng);
    pool.sort_by_key(|&i| all[i].len() > budget);
    let mut chosen = Vec::new();
    let mut used = 0;
    for i in pool {
        if chosen.len() == 4 {
            break;
        }
        if chosen.is_empty() || used + all[i].len() <= budget {
            used += all[i].len();
            chosen.push(i);
        }
    }
    chosen.sort_unstable();
    let points: Vec<Tensor> = chosen.iter().map(|&i| all[i].clone()).collect();

    let full = Inputs::from_pair(pair);
    let side = pair.target.shape()[0];
    for attempt in 1..=MAX_ATTEMPTS {
        let row = rng.random_range(0..=side - CROP);
        let col = rng.random_range(0..=side - CROP);
        // label maps are piecewise constant, so a pre-activation sitting on a
        // kink repeats in every crop; later attempts move the inputs off it
        let mut inputs = full.crop(row, col, CROP)?;
        if attempt > 1 {
            inputs = inputs.jitter(0.1, &mut rng);
        }
        let res = grad_check_with(
            |tape, vars| {
                let bound: Vec<(usize, Var)> = chosen.iter().copied().zip(vars.iter().copied()).collect();
                let vs = bind_mixed(tape, &all, &bound);
                Ok(forward(tape, &inputs, &vs, &model, loss)?.loss)
            },
            &points,
            GRAD_EPS,
            CHECK_MARGIN,
        );
        match res {
            Err(KernelError::NearKink { .. }) => continue,
            Err(e) => return Err(e.into()),
            Ok(r) => {
                return Ok(GradCheckSummary {
                    component,
                    tensors: chosen.iter().map(|&i| names[i].clone()).collect(),
                    coordinates: r.coordinates,
                    max_relative_error: r.max_relative_error,
                    relu_margin: r.relu_margin,
                    attempts: attempt,
                })
            }
        }
    }
    Err(GeneratorError::GradCheck(format!(
        "every one of {MAX_ATTEMPTS} crops put a relu input within reach of its kink"
    )))
}

struct StepResult {
    loss: f64,
    objective: Option<f64>,
    grads: Vec<Tensor>,
}

/// One forward/backward with `trainable` as parameters.
fn step(inputs: &Inputs, model: &Model, trainable: std::ops::Range<usize>, loss: Loss) -> Result<StepResult, KernelError> {
    let mut tape = GradTape::new();
    let all = model.tensors();
    let params: Vec<(usize, Var)> = trainable.clone().map(|i| (i, tape.param(all[i].clone()))).collect();
    let vars = bind_mixed(&mut tape, &all, &params);
    let f = forward(&mut tape, inputs, &vars, model, loss)?;
    let grads = tape.backward(f.loss)?;
    Ok(StepResult {
        loss: tape.value(f.loss).data()[0],
        objective: f.objective.map(|o| tape.value(o).data()[0]),
        grads: params
            .iter()
            .map(|&(i, v)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(all[i].shape())))
            .collect(),
    })
}

fn diverged(step: usize) -> impl Fn(KernelError) -> GeneratorError {
    move |e| match e {
        KernelError::NonFinite { .. } => GeneratorError::Diverged { step },
        other => other.into(),
    }
}

fn output(inputs: &Inputs, model: &Model) -> Result<Tensor, KernelError> {
    let mut tape = GradTape::new();
    let vars = bind_all(&mut tape, &model.tensors(), false);
    let f = forward(&mut tape, inputs, &vars, model, Loss::Recon)?;
    Ok(tape.value(f.fake).clone())
}

pub fn toy_train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let pair = toy_pair(config.size, config.c_o, config.c_b, config.retrieved, config.seed)?;
    let k = config.k();
    let mut model = Model {
        fusion: FusionParams::seeded(k, config.fusion_steps, config.seed.wrapping_add(1)),
        generator: GeneratorWeights::seeded(config.generator(), config.seed.wrapping_add(2))?,
        discriminator: DiscriminatorWeights::seeded(config.discriminator(), config.seed.wrapping_add(3))?,
    };
    let adv = config.mode == TrainMode::Adv;
    let grad_check = if config.grad_check {
        let s = sampled_grad_check(
            config.mode,
            &pair,
            &model.fusion,
            &model.generator,
            adv.then_some(&model.discriminator),
            config.grad_budget,
            config.seed.wrapping_add(4),
        )?;
        if !(s.max_relative_error < GRAD_TOLERANCE) {
            return Err(GeneratorError::GradCheck(format!(
                "{:?} relative error {:e} on {:?}",
                s.component, s.max_relative_error, s.tensors
            )));
        }
        Some(s)
    } else {
        None
    };

    let inputs = Inputs::from_pair(&pair);
    let split = model.split();
    let total = model.tensors().len();
    let mut opt_g = Adam::new(config.lr);
    let mut opt_d = Adam::new(config.lr);
    let mut losses = Vec::with_capacity(config.steps);
    let mut disc = Vec::new();
    let main = if adv { Loss::Generator } else { Loss::Recon };
    for s in 0..config.steps {
        if adv {
            let d = step(&inputs, &model, split..total, Loss::Discriminator).map_err(diverged(s))?;
            disc.push(d.objective.unwrap_or(f64::NAN));
            opt_d.step(&mut model.tensors_mut()[split..], &d.grads);
        }
        let g = step(&inputs, &model, 0..split, main).map_err(diverged(s))?;
        if !g.loss.is_finite() {
            return Err(GeneratorError::Diverged { step: s });
        }
        losses.push(g.loss);
        opt_g.step(&mut model.tensors_mut()[..split], &g.grads);
    }
    let last = step(&inputs, &model, 0..0, main).map_err(diverged(config.steps))?;
    let initial = losses.first().copied().unwrap_or(last.loss);
    let out = output(&inputs, &model)?;
    let report = TrainReport {
        mode: config.mode,
        seed: config.seed,
        steps: config.steps,
        lr: config.lr,
        losses,
        discriminator: disc,
        initial_loss: initial,
        final_loss: last.loss,
        reduction: if initial != 0.0 { 1.0 - last.loss / initial } else { 0.0 },
        grad_check,
    };
    Ok(TrainOutcome {
        report,
        pair,
        fusion: model.fusion,
        generator: model.generator,
        discriminator: adv.then_some(model.discriminator),
        output: out,
    })
}
