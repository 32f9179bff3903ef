//! Background fusion: compose retrieved backgrounds with the query
//! foreground, then encode and refine them into the feature map `m̂`.
//!
//! ```text
//! m_0 = relu(F(M̂_q)) + mean_i relu(F(M̂_r,i))
//! m_t = m_{t-1} + relu(M(m_{t-1}))        t = 1..T
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{Canvas, ChannelSpace, LabelMap, LayoutError};
use crate::params::ParamGroup;
use crate::tensor::{ConvParams, GradTape, KernelError, Tensor, Var};

pub const DEFAULT_STEPS: usize = 3;
pub const INIT_BOUND: f64 = 0.05;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("fusion needs at least one retrieved map")]
    NoRetrieved,
    #[error("extent mismatch: {0} vs {1}")]
    Extent(Canvas, Canvas),
    #[error("expected a {expected:?} label map, got {actual:?}")]
    Space { expected: ChannelSpace, actual: ChannelSpace },
    #[error("expected {expected} channels, got {actual}")]
    Channels { expected: usize, actual: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

/// `C_b + C_o` channels, background block first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComposedLabelMap {
    map: LabelMap,
    c_b: usize,
}

impl ComposedLabelMap {
    pub fn map(&self) -> &LabelMap {
        &self.map
    }

    pub fn canvas(&self) -> Canvas {
        self.map.canvas()
    }

    pub fn c_b(&self) -> usize {
        self.c_b
    }

    pub fn c_o(&self) -> usize {
        self.map.channels() - self.c_b
    }

    pub fn to_tensor(&self) -> Tensor {
        self.map.to_tensor()
    }

    fn block(&self, range: std::ops::Range<usize>, space: ChannelSpace) -> LabelMap {
        let k = self.map.channels();
        let data = self.map.data().chunks(k).flat_map(|px| px[range.clone()].iter().copied()).collect();
        LabelMap::from_raw(self.canvas(), range.len(), space, data).expect("block extents")
    }

    pub fn background_block(&self) -> LabelMap {
        self.block(0..self.c_b, ChannelSpace::Background)
    }

    pub fn foreground_block(&self) -> LabelMap {
        self.block(self.c_b..self.map.channels(), ChannelSpace::Foreground)
    }
}

/// `[M_b ; M_q]` along channels.
pub fn compose_label_map(background: &LabelMap, foreground: &LabelMap) -> Result<ComposedLabelMap, FusionError> {
    if background.space() != ChannelSpace::Background {
        return Err(FusionError::Space {
            expected: ChannelSpace::Background,
            actual: background.space(),
        });
    }
    if foreground.space() != ChannelSpace::Foreground {
        return Err(FusionError::Space {
            expected: ChannelSpace::Foreground,
            actual: foreground.space(),
        });
    }
    if background.canvas() != foreground.canvas() {
        return Err(FusionError::Extent(background.canvas(), foreground.canvas()));
    }
    let (c_b, c_o) = (background.channels(), foreground.channels());
    let mut data = Vec::with_capacity(background.canvas().pixels() * (c_b + c_o));
    for (b, f) in background.data().chunks(c_b.max(1)).zip(foreground.data().chunks(c_o.max(1))) {
        data.extend_from_slice(&b[..c_b]);
        data.extend_from_slice(&f[..c_o]);
    }
    let map = LabelMap::from_raw(background.canvas(), c_b + c_o, ChannelSpace::Composed, data)?;
    Ok(ComposedLabelMap { map, c_b })
}

/// The query with an all-zero background block.
pub fn pad_query(foreground: &LabelMap, c_b: usize) -> Result<ComposedLabelMap, FusionError> {
    compose_label_map(&LabelMap::zeros(foreground.canvas(), c_b, ChannelSpace::Background), foreground)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub channels: usize,
    pub steps: usize,
}

/// Encoder `F` and refiner `M`, both 3x3 convolutions over `k = C_o + C_b` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub f: ConvParams,
    pub m: ConvParams,
    pub steps: usize,
}

impl FusionParams {
    pub fn zeros(channels: usize, steps: usize) -> Self {
        Self {
            f: ConvParams::zeros(channels, channels),
            m: ConvParams::zeros(channels, channels),
            steps,
        }
    }

    /// Every weight and bias uniform in `[-0.05, 0.05)`.
    pub fn seeded(channels: usize, steps: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            f: ConvParams::uniform(channels, channels, INIT_BOUND, &mut rng),
            m: ConvParams::uniform(channels, channels, INIT_BOUND, &mut rng),
            steps,
        }
    }

    pub fn channels(&self) -> usize {
        self.f.in_channels()
    }

    pub fn config(&self) -> FusionConfig {
        FusionConfig {
            channels: self.channels(),
            steps: self.steps,
        }
    }

    /// `F.w, F.b, M.w, M.b`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.f.weight, &self.f.bias, &self.m.weight, &self.m.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.f.weight, &mut self.f.bias, &mut self.m.weight, &mut self.m.bias]
    }

    pub fn to_group(&self) -> ParamGroup {
        let names = ["f.weight", "f.bias", "m.weight", "m.bias"];
        ParamGroup {
            config: serde_json::to_value(self.config()).expect("config serializes"),
            tensors: names.iter().zip(self.tensors()).map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn from_group(group: &ParamGroup) -> Result<Self, FusionError> {
        let cfg: FusionConfig = group.config()?;
        let f = ConvParams::new(group.get("f.weight")?.clone(), group.get("f.bias")?.clone())?;
        let m = ConvParams::new(group.get("m.weight")?.clone(), group.get("m.bias")?.clone())?;
        for p in [&f, &m] {
            if p.in_channels() != cfg.channels || p.out_channels() != cfg.channels {
                return Err(FusionError::Channels {
                    expected: cfg.channels,
                    actual: p.out_channels(),
                });
            }
        }
        Ok(Self { f, m, steps: cfg.steps })
    }
}

/// Tape handles for `F.w, F.b, M.w, M.b`.
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub f_w: Var,
    pub f_b: Var,
    pub m_w: Var,
    pub m_b: Var,
}

impl FusionVars {
    pub fn from_iter(vars: &mut impl Iterator<Item = Var>) -> Self {
        let mut next = || vars.next().expect("fusion needs four tensors");
        Self {
            f_w: next(),
            f_b: next(),
            m_w: next(),
            m_b: next(),
        }
    }

    pub fn bind(tape: &mut GradTape, params: &FusionParams, trainable: bool) -> Self {
        let mut vars = params
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect::<Vec<_>>()
            .into_iter();
        Self::from_iter(&mut vars)
    }
}

/// Records the fusion network on `tape` and returns `m_T`. An empty
/// `retrieved` list fails in the group mean.
pub fn fusion_graph(tape: &mut GradTape, query: Var, retrieved: &[Var], p: FusionVars, steps: usize) -> Result<Var, KernelError> {
    let encode = |tape: &mut GradTape, x: Var| -> Result<Var, KernelError> {
        let y = tape.conv2d(x, p.f_w, Some(p.f_b))?;
        tape.relu(y)
    };
    let q = encode(tape, query)?;
    let mut encoded = Vec::with_capacity(retrieved.len());
    for &r in retrieved {
        encoded.push(encode(tape, r)?);
    }
    let pooled = tape.group_mean(&encoded)?;
    let mut m = tape.add(q, pooled)?;
    for _ in 0..steps {
        let y = tape.conv2d(m, p.m_w, Some(p.m_b))?;
        let y = tape.relu(y)?;
        m = tape.add(m, y)?;
    }
    Ok(m)
}

/// `m̂` with shape `H x W x (C_b + C_o)`.
pub fn fuse_background(query: &ComposedLabelMap, retrieved: &[ComposedLabelMap], params: &FusionParams) -> Result<Tensor, FusionError> {
    if retrieved.is_empty() {
        return Err(FusionError::NoRetrieved);
    }
    let k = query.map().channels();
    if params.channels() != k {
        return Err(FusionError::Channels {
            expected: params.channels(),
            actual: k,
        });
    }
    for r in retrieved {
        if r.canvas() != query.canvas() {
            return Err(FusionError::Extent(query.canvas(), r.canvas()));
        }
        if r.map().channels() != k {
            return Err(FusionError::Channels {
                expected: k,
                actual: r.map().channels(),
            });
        }
    }
    let mut tape = GradTape::new();
    let vars = FusionVars::bind(&mut tape, params, false);
    let q = tape.constant(query.to_tensor());
    let rs: Vec<Var> = retrieved.iter().map(|r| tape.constant(r.to_tensor())).collect();
    let out = fusion_graph(&mut tape, q, &rs, vars, params.steps)?;
    Ok(tape.value(out).clone())
}
