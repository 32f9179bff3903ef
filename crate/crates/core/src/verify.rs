//! Finite-difference verification of every differentiable building block.
//!
//! Each check draws a random point, differentiates `sum(out * probe)` for a
//! fixed random `probe` with respect to all inputs and weights, and redraws
//! when the point sits too close to a relu kink.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::fusion::{fusion_graph, FusionParams, FusionVars};
use crate::generator::{generator_graph, spade_graph, GeneratorConfig, GeneratorVars, GeneratorWeights, SpadeParams, SpadeVars};
use crate::tensor::{grad_check_many, ConvParams, GradTape, KernelError, Tensor, Var, DEFAULT_EPSILON};

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-6;
const MAX_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentCheck {
    pub component: &'static str,
    pub tensors: usize,
    pub coordinates: usize,
    pub max_relative_error: f64,
    /// Points drawn, including the ones rejected as near-kink.
    pub attempts: usize,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

fn probed(tape: &mut GradTape, out: Var, probe: &Tensor) -> Result<Var, KernelError> {
    let w = tape.constant(probe.clone());
    let y = tape.mul(out, w)?;
    tape.sum(y)
}

/// Retries `draw` until the gradient check runs on a kink-free point.
fn run<D, F>(component: &'static str, seed: u64, draw: D, f: F) -> Result<ComponentCheck, KernelError>
where
    D: Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Tensor),
    F: Fn(&mut GradTape, &[Var], &Tensor) -> Result<Var, KernelError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = None;
    for attempt in 1..=MAX_ATTEMPTS {
        let (points, probe) = draw(&mut rng);
        match grad_check_many(|t, v| f(t, v, &probe), &points, EPS) {
            Ok(r) => {
                return Ok(ComponentCheck {
                    component,
                    tensors: points.len(),
                    coordinates: r.coordinates,
                    max_relative_error: r.max_relative_error,
                    attempts: attempt,
                })
            }
            Err(e @ KernelError::NearKink { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

pub fn check_conv2d(seed: u64) -> Result<ComponentCheck, KernelError> {
    run(
        "conv2d",
        seed,
        |rng| {
            let x = Tensor::uniform(&[6, 5, 3], -1.0, 1.0, rng);
            let p = ConvParams::uniform(3, 4, 0.5, rng);
            (vec![x, p.weight, p.bias], Tensor::uniform(&[6, 5, 4], -1.0, 1.0, rng))
        },
        |t, v, probe| {
            let y = t.conv2d(v[0], v[1], Some(v[2]))?;
            probed(t, y, probe)
        },
    )
}

pub fn check_channel_normalize(seed: u64) -> Result<ComponentCheck, KernelError> {
    run(
        "channel_normalize",
        seed,
        |rng| {
            let x = Tensor::uniform(&[5, 4, 3], -1.0, 1.0, rng);
            (vec![x], Tensor::uniform(&[5, 4, 3], -1.0, 1.0, rng))
        },
        |t, v, probe| {
            let y = t.channel_normalize(v[0], DEFAULT_EPSILON)?;
            probed(t, y, probe)
        },
    )
}

/// Condition at half the activation resolution, so the resize is covered too.
pub fn check_spade_layer(seed: u64) -> Result<ComponentCheck, KernelError> {
    run(
        "spade_layer",
        seed,
        |rng| {
            let h = Tensor::uniform(&[6, 6, 4], -1.0, 1.0, rng);
            let cond = Tensor::uniform(&[3, 3, 3], 0.0, 1.0, rng);
            let p = SpadeParams::seeded(3, 4, rng);
            let mut points = vec![h, cond];
            points.extend(p.tensors().into_iter().cloned());
            (points, Tensor::uniform(&[6, 6, 4], -1.0, 1.0, rng))
        },
        |t, v, probe| {
            let vars = SpadeVars::from_iter(&mut v[2..].iter().copied());
            let y = spade_graph(t, v[0], v[1], vars, DEFAULT_EPSILON)?;
            probed(t, y, probe)
        },
    )
}

/// Two retrieved maps, two refinement steps; the maps themselves are
/// differentiated as well as the weights.
pub fn check_fusion(seed: u64) -> Result<ComponentCheck, KernelError> {
    run(
        "fusion",
        seed,
        |rng| {
            let shape = [6, 6, 4];
            let q = Tensor::uniform(&shape, 0.0, 1.0, rng);
            let r1 = Tensor::uniform(&shape, 0.0, 1.0, rng);
            let r2 = Tensor::uniform(&shape, 0.0, 1.0, rng);
            let p = FusionParams::seeded(4, 2, rand::Rng::random(rng));
            let mut points = vec![q, r1, r2];
            points.extend(p.tensors().into_iter().cloned());
            (points, Tensor::uniform(&shape, -1.0, 1.0, rng))
        },
        |t, v, probe| {
            let vars = FusionVars::from_iter(&mut v[3..].iter().copied());
            let y = fusion_graph(t, v[0], &v[1..3], vars, 2)?;
            probed(t, y, probe)
        },
    )
}

/// Tiny generator: 4 channels, 2 residual blocks, one upsample.
pub fn check_generator(seed: u64) -> Result<ComponentCheck, KernelError> {
    let config = GeneratorConfig {
        channels: 4,
        ..GeneratorConfig::new(4)
    };
    run(
        "generator",
        seed,
        |rng| {
            let feature = Tensor::uniform(&[6, 6, 4], 0.0, 1.0, rng);
            let w = GeneratorWeights::seeded(config, rand::Rng::random(rng)).expect("valid config");
            let mut points = vec![feature];
            points.extend(w.tensors().into_iter().cloned());
            (points, Tensor::uniform(&[6, 6, 3], -1.0, 1.0, rng))
        },
        |t, v, probe| {
            let vars = GeneratorVars::from_iter(&config, &mut v[1..].iter().copied());
            let y = generator_graph(t, v[0], &vars, &config)?;
            probed(t, y, probe)
        },
    )
}

/// All five checks, each seeded from `seed`.
pub fn verify_components(seed: u64) -> Result<Vec<ComponentCheck>, KernelError> {
    Ok(vec![
        check_conv2d(seed)?,
        check_channel_normalize(seed.wrapping_add(1))?,
        check_spade_layer(seed.wrapping_add(2))?,
        check_fusion(seed.wrapping_add(3))?,
        check_generator(seed.wrapping_add(4))?,
    ])
}
