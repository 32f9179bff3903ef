//! Reverse-mode gradient tape.
//!
//! Forward calls evaluate eagerly through the kernels in [`super::ops`] and
//! record what the backward pass needs. A tape belongs to one owner and is
//! dropped after its backward pass.

use super::ops::{self, avg_pool2_backward, channel_normalize_backward, conv2d_backward};
use super::{KernelError, Result, Tensor};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv { input: Var, weight: Var, bias: Option<Var> },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { input: Var, scale: f64 },
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Abs(Var),
    Normalize { input: Var, var: Vec<f64>, epsilon: f64 },
    Resize { input: Var, in_h: usize, in_w: usize },
    AvgPool2 { input: Var, in_h: usize, in_w: usize },
    GroupMean(Vec<Var>),
    Concat { parts: Vec<Var>, widths: Vec<usize> },
    Mean(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct GradTape {
    nodes: Vec<Node>,
    relu_margin: f64,
    kinks: u64,
}

/// Gradients of a scalar with respect to every recorded value that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the scalar does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            relu_margin: f64::INFINITY,
            kinks: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// Hash of the sign of every relu and abs input recorded so far. Two
    /// evaluations with equal signatures took the same linear piece.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    /// Smallest `|x|` fed into any relu so far.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// A trainable leaf: gradients are tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf: no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, parents: &[Var], name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        let needs = self.needs(parents);
        Ok(self.push(value, op, needs))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::conv2d_raw(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        self.record(out, Op::Conv { input, weight, bias }, &parents, "conv2d")
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let margin = x.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let out = ops::elementwise(ops::ElementwiseOp::Relu, x, None)?;
        let kinks = fold_signs(self.kinks, x.data());
        self.relu_margin = self.relu_margin.min(margin);
        self.kinks = kinks;
        self.record(out, Op::Relu(input), &[input], "relu")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::elementwise(ops::ElementwiseOp::Add, self.value(a), Some(self.value(b)))?;
        self.record(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::elementwise(ops::ElementwiseOp::Mul, self.value(a), Some(self.value(b)))?;
        self.record(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(KernelError::Shape {
                op: "sub",
                expected: x.shape().to_vec(),
                actual: y.shape().to_vec(),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.record(out, Op::Sub(a, b), &[a, b], "sub")
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.map(input, |v| scale * v + shift)?;
        self.record(out, Op::Affine { input, scale }, &[input], "affine")
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        let out = self.map(input, f64::tanh)?;
        self.record(out, Op::Tanh(input), &[input], "tanh")
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = self.map(input, sigmoid)?;
        self.record(out, Op::Sigmoid(input), &[input], "sigmoid")
    }

    /// `log(sigmoid(x))`, evaluated without forming the sigmoid.
    pub fn log_sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = self.map(input, log_sigmoid)?;
        self.record(out, Op::LogSigmoid(input), &[input], "log_sigmoid")
    }

    pub fn abs(&mut self, input: Var) -> Result<Var> {
        self.kinks = fold_signs(self.kinks, self.nodes[input.0].value.data());
        let out = self.map(input, f64::abs)?;
        self.record(out, Op::Abs(input), &[input], "abs")
    }

    pub fn channel_normalize(&mut self, input: Var, epsilon: f64) -> Result<Var> {
        let n = ops::channel_normalize(self.value(input), epsilon)?;
        self.record(
            n.output,
            Op::Normalize {
                input,
                var: n.var,
                epsilon,
            },
            &[input],
            "channel_normalize",
        )
    }

    pub fn nearest_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (in_h, in_w, _) = self.value(input).hwc()?;
        let out = ops::nearest_resize(self.value(input), out_h, out_w)?;
        self.record(out, Op::Resize { input, in_h, in_w }, &[input], "nearest_resize")
    }

    pub fn nearest_upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (in_h, in_w, _) = self.value(input).hwc()?;
        let out = ops::nearest_upsample(self.value(input), factor)?;
        self.record(out, Op::Resize { input, in_h, in_w }, &[input], "nearest_upsample")
    }

    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let (in_h, in_w, _) = self.value(input).hwc()?;
        let out = ops::avg_pool2(self.value(input))?;
        self.record(out, Op::AvgPool2 { input, in_h, in_w }, &[input], "avg_pool2")
    }

    /// Mean over a group of equally shaped values.
    pub fn group_mean(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(KernelError::EmptyGroup { op: "group_mean" });
        }
        let slices: Vec<Tensor> = inputs.iter().map(|&v| self.value(v).clone()).collect();
        let out = ops::group_mean(&Tensor::stack(&slices)?)?;
        self.record(out, Op::GroupMean(inputs.to_vec()), inputs, "group_mean")
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let widths = tensors.iter().map(|t| t.shape()[t.shape().len() - 1]).collect();
        let out = ops::concat_channels(&tensors)?;
        self.record(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
            parts,
            "concat_channels",
        )
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out = Tensor::scalar(x.sum() / x.len() as f64);
        self.record(out, Op::Mean(input), &[input], "mean")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(input).sum());
        self.record(out, Op::Sum(input), &[input], "sum")
    }

    fn map(&self, input: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let x = self.value(input);
        Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect())
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(KernelError::Shape {
                op: "backward",
                expected: vec![1],
                actual: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            for (parent, pg) in self.local_grads(node, &g)? {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(pg.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let zip = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Result<Tensor> {
            Tensor::new(a.shape(), a.data().iter().zip(g.data()).map(|(&x, &gy)| f(x, gy)).collect())
        };
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv { input, weight, bias } => {
                let (gi, gw, gb) = conv2d_backward(val(*input), val(*weight), g)?;
                let mut v = vec![(*input, gi), (*weight, gw)];
                if let Some(b) = bias {
                    v.push((*b, gb));
                }
                v
            }
            Op::Relu(x) => vec![(*x, zip(val(*x), &|x, gy| if x > 0.0 { gy } else { 0.0 })?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, zip(g, &|_, gy| -gy)?)],
            Op::Mul(a, b) => vec![(*a, zip(val(*b), &|y, gy| y * gy)?), (*b, zip(val(*a), &|x, gy| x * gy)?)],
            Op::Affine { input, scale } => vec![(*input, zip(g, &|_, gy| scale * gy)?)],
            Op::Tanh(x) => vec![(*x, zip(out, &|t, gy| (1.0 - t * t) * gy)?)],
            Op::Sigmoid(x) => vec![(*x, zip(out, &|s, gy| s * (1.0 - s) * gy)?)],
            Op::LogSigmoid(x) => vec![(*x, zip(val(*x), &|x, gy| sigmoid(-x) * gy)?)],
            Op::Abs(x) => vec![(*x, zip(val(*x), &|x, gy| x.signum() * gy)?)],
            Op::Normalize { input, var, epsilon } => {
                vec![(*input, channel_normalize_backward(out, var, *epsilon, g)?)]
            }
            Op::Resize { input, in_h, in_w } => {
                vec![(*input, ops::nearest_resize_backward(g, *in_h, *in_w)?)]
            }
            Op::AvgPool2 { input, in_h, in_w } => vec![(*input, avg_pool2_backward(g, *in_h, *in_w)?)],
            Op::GroupMean(inputs) => {
                let scale = 1.0 / inputs.len() as f64;
                let share = zip(g, &|_, gy| gy * scale)?;
                inputs.iter().map(|&v| (v, share.clone())).collect()
            }
            Op::Concat { parts, widths } => {
                let pieces = ops::split_channels(g, widths)?;
                parts.iter().copied().zip(pieces).collect()
            }
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                vec![(*x, Tensor::full(val(*x).shape(), g.data()[0] / n))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.data()[0]))],
        })
    }
}

fn fold_signs(mut h: u64, data: &[f64]) -> u64 {
    for chunk in data.chunks(64) {
        let word = chunk.iter().enumerate().fold(0u64, |w, (i, &v)| w | (((v > 0.0) as u64) << i));
        h = (h ^ word).wrapping_mul(0x0000_0100_0000_01b3) ^ chunk.len() as u64;
    }
    h
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    // log(sigmoid(x)) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
