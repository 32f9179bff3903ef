//! Forward kernels and their analytic backward passes.
//!
//! Every forward kernel is a pure function over immutable inputs and checks
//! its output for NaN/Inf before returning.

use rand::Rng;
use rayon::prelude::*;

use super::{KernelError, Result, Scalar, Tensor};

/// Normalization epsilon used when callers do not pick one.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Spatial kernel size of every convolution. Stride 1, zero padding 1.
pub const KERNEL: usize = 3;

// Below this many multiply-adds a convolution runs on the calling thread.
const PAR_CONV_WORK: usize = 1 << 20;

/// Weights of a 3x3 convolution: `weight` is `[3, 3, cin, cout]`, `bias` is `[cout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Scalar = f64> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (_, cout) = weight_channels(&weight)?;
        if bias.shape() != [cout] {
            return Err(KernelError::Shape {
                op: "conv_params",
                expected: vec![cout],
                actual: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[KERNEL, KERNEL, cin, cout]),
            bias: Tensor::zeros(&[cout]),
        }
    }

    /// Center tap 1 on matching channels, everything else 0.
    pub fn identity(channels: usize) -> Self {
        let mut p = Self::zeros(channels, channels);
        for c in 0..channels {
            let idx = ((KERNEL + 1) * channels + c) * channels + c;
            p.weight.data_mut()[idx] = T::one();
        }
        p
    }

    /// Weights and bias uniform in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(cin: usize, cout: usize, bound: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::uniform(&[KERNEL, KERNEL, cin, cout], -bound, bound, rng),
            bias: Tensor::uniform(&[cout], -bound, bound, rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[3]
    }
}

pub(crate) fn weight_channels<T: Scalar>(weight: &Tensor<T>) -> Result<(usize, usize)> {
    match weight.shape()[..] {
        [KERNEL, KERNEL, cin, cout] => Ok((cin, cout)),
        _ => Err(KernelError::Shape {
            op: "conv2d",
            expected: vec![KERNEL, KERNEL, 0, 0],
            actual: weight.shape().to_vec(),
        }),
    }
}

/// 3x3 convolution, stride 1, zero padding 1. Output keeps the input's
/// spatial extent.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    conv2d_raw(input, &params.weight, Some(&params.bias))
}

pub(crate) fn conv2d_raw<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (h, w, cin) = input.hwc()?;
    let (wcin, cout) = weight_channels(weight)?;
    if wcin != cin {
        return Err(KernelError::Shape {
            op: "conv2d",
            expected: vec![h, w, wcin],
            actual: input.shape().to_vec(),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(KernelError::Shape {
                op: "conv2d",
                expected: vec![cout],
                actual: b.shape().to_vec(),
            });
        }
    }
    let x = input.data();
    let k = weight.data();
    let mut out = vec![T::zero(); h * w * cout];

    let row = |oy: usize, out_row: &mut [T]| {
        for ox in 0..w {
            let acc = &mut out_row[ox * cout..(ox + 1) * cout];
            if let Some(b) = bias {
                acc.copy_from_slice(b.data());
            }
            for ky in 0..KERNEL {
                let Some(iy) = (oy + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..KERNEL {
                    let Some(ix) = (ox + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let px = &x[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    let tap = &k[(ky * KERNEL + kx) * cin * cout..(ky * KERNEL + kx + 1) * cin * cout];
                    for (ci, &v) in px.iter().enumerate() {
                        if v == T::zero() {
                            continue;
                        }
                        let wrow = &tap[ci * cout..(ci + 1) * cout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a = *a + v * wv;
                        }
                    }
                }
            }
        }
    };

    if h * w * cin * cout * KERNEL * KERNEL >= PAR_CONV_WORK {
        out.par_chunks_mut(w * cout).enumerate().for_each(|(oy, r)| row(oy, r));
    } else {
        out.chunks_mut(w * cout).enumerate().for_each(|(oy, r)| row(oy, r));
    }
    Tensor::new(&[h, w, cout], out)?.ensure_finite("conv2d")
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (h, w, cin) = input.hwc()?;
    let (_, cout) = weight_channels(weight)?;
    let x = input.data();
    let k = weight.data();
    let g = grad_out.data();
    let mut gin = vec![T::zero(); h * w * cin];
    let mut gw = vec![T::zero(); KERNEL * KERNEL * cin * cout];
    let mut gb = vec![T::zero(); cout];

    for oy in 0..h {
        for ox in 0..w {
            let go = &g[(oy * w + ox) * cout..(oy * w + ox + 1) * cout];
            for (b, &v) in gb.iter_mut().zip(go) {
                *b = *b + v;
            }
            for ky in 0..KERNEL {
                let Some(iy) = (oy + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..KERNEL {
                    let Some(ix) = (ox + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let base = (iy * w + ix) * cin;
                    let tap = (ky * KERNEL + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = x[base + ci];
                        let wrow = &k[tap + ci * cout..tap + (ci + 1) * cout];
                        let gwrow = &mut gw[tap + ci * cout..tap + (ci + 1) * cout];
                        let mut acc = T::zero();
                        for co in 0..cout {
                            acc = acc + go[co] * wrow[co];
                            gwrow[co] = gwrow[co] + xv * go[co];
                        }
                        gin[base + ci] = gin[base + ci] + acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(&[h, w, cin], gin)?,
        Tensor::new(&[KERNEL, KERNEL, cin, cout], gw)?,
        Tensor::new(&[cout], gb)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Relu,
    Add,
    Mul,
}

/// Pointwise `relu(a)`, `a + b` or `a * b`. Binary ops need identical shapes.
pub fn elementwise<T: Scalar>(op: ElementwiseOp, a: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let data = match op {
        ElementwiseOp::Relu => a.data().iter().map(|&v| v.max(T::zero())).collect(),
        ElementwiseOp::Add | ElementwiseOp::Mul => {
            let b = b.ok_or_else(|| KernelError::Parameter {
                op: "elementwise",
                detail: format!("{op:?} needs two operands"),
            })?;
            if a.shape() != b.shape() {
                return Err(KernelError::Shape {
                    op: "elementwise",
                    expected: a.shape().to_vec(),
                    actual: b.shape().to_vec(),
                });
            }
            let f = if op == ElementwiseOp::Add {
                |x: T, y: T| x + y
            } else {
                |x: T, y: T| x * y
            };
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
        }
    };
    Tensor::new(a.shape(), data)?.ensure_finite("elementwise")
}

/// Mean over the leading group axis of an `m x H x W x C` tensor.
///
/// Each output is `lo + sum(v - lo) / m` over the group values sorted
/// ascending, `lo` being the smallest. The result does not depend on the
/// order of the group and a group of identical values returns that value.
pub fn group_mean<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, h, w, c] = input.shape()[..] else {
        return Err(KernelError::Shape {
            op: "group_mean",
            expected: vec![0, 0, 0, 0],
            actual: input.shape().to_vec(),
        });
    };
    if m == 0 {
        return Err(KernelError::EmptyGroup { op: "group_mean" });
    }
    let n = h * w * c;
    let x = input.data();
    let count = T::from_f64(m as f64);
    let mut column = vec![T::zero(); m];
    let out = (0..n)
        .map(|i| {
            for (k, v) in column.iter_mut().enumerate() {
                *v = x[k * n + i];
            }
            column.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let lo = column[0];
            let spread = column[1..].iter().fold(T::zero(), |acc, &v| acc + (v - lo));
            lo + spread / count
        })
        .collect();
    Tensor::new(&[h, w, c], out)?.ensure_finite("group_mean")
}

/// Replicates each pixel into a `factor x factor` block.
pub fn nearest_upsample<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(KernelError::Parameter {
            op: "nearest_upsample",
            detail: "factor must be at least 1".into(),
        });
    }
    let (h, w, _) = input.hwc()?;
    nearest_resize(input, h * factor, w * factor)
}

/// Nearest-neighbour resampling to `out_h x out_w`; output pixel `(y, x)`
/// reads source pixel `(y * h / out_h, x * w / out_w)`.
pub fn nearest_resize<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w, c) = input.hwc()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(KernelError::Parameter {
            op: "nearest_resize",
            detail: format!("cannot resize {h}x{w} to {out_h}x{out_w}"),
        });
    }
    let src = input.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let iy = oy * h / out_h;
        for ox in 0..out_w {
            let ix = ox * w / out_w;
            out.extend_from_slice(&src[(iy * w + ix) * c..(iy * w + ix + 1) * c]);
        }
    }
    Tensor::new(&[out_h, out_w, c], out)
}

pub(crate) fn nearest_resize_backward<T: Scalar>(grad_out: &Tensor<T>, in_h: usize, in_w: usize) -> Result<Tensor<T>> {
    let (out_h, out_w, c) = grad_out.hwc()?;
    let g = grad_out.data();
    let mut gin = vec![T::zero(); in_h * in_w * c];
    for oy in 0..out_h {
        let iy = oy * in_h / out_h;
        for ox in 0..out_w {
            let ix = ox * in_w / out_w;
            let dst = (iy * in_w + ix) * c;
            let src = (oy * out_w + ox) * c;
            for k in 0..c {
                gin[dst + k] = gin[dst + k] + g[src + k];
            }
        }
    }
    Tensor::new(&[in_h, in_w, c], gin)
}

/// Output of [`channel_normalize`] plus the per-channel statistics it used.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized<T: Scalar = f64> {
    pub output: Tensor<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Per-channel normalization over all spatial positions:
/// `(x - mean) / sqrt(var + epsilon)` with the biased variance.
pub fn channel_normalize<T: Scalar>(input: &Tensor<T>, epsilon: f64) -> Result<Normalized<T>> {
    let (h, w, c) = input.hwc()?;
    let n = h * w;
    if n == 0 {
        return Err(KernelError::Parameter {
            op: "channel_normalize",
            detail: "empty spatial extent".into(),
        });
    }
    if !(epsilon > 0.0) {
        return Err(KernelError::Parameter {
            op: "channel_normalize",
            detail: format!("epsilon must be positive, got {epsilon}"),
        });
    }
    let x = input.data();
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut mean = vec![T::zero(); c];
    for px in x.chunks(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m = *m + v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m * inv_n);
    let mut var = vec![T::zero(); c];
    for px in x.chunks(c) {
        for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
            let d = v - m;
            *s = *s + d * d;
        }
    }
    var.iter_mut().for_each(|s| *s = *s * inv_n);
    let eps = T::from_f64(epsilon);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = Vec::with_capacity(x.len());
    for px in x.chunks(c) {
        for k in 0..c {
            out.push((px[k] - mean[k]) * inv_std[k]);
        }
    }
    let output = Tensor::new(&[h, w, c], out)?.ensure_finite("channel_normalize")?;
    Ok(Normalized { output, mean, var })
}

/// Backward of [`channel_normalize`] given its output `y`:
/// `dx = (g - mean(g) - y * mean(g * y)) / sqrt(var + eps)`.
pub(crate) fn channel_normalize_backward<T: Scalar>(
    output: &Tensor<T>,
    var: &[T],
    epsilon: f64,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w, c) = output.hwc()?;
    let inv_n = T::one() / T::from_f64((h * w) as f64);
    let y = output.data();
    let g = grad_out.data();
    let mut mg = vec![T::zero(); c];
    let mut mgy = vec![T::zero(); c];
    for (py, pg) in y.chunks(c).zip(g.chunks(c)) {
        for k in 0..c {
            mg[k] = mg[k] + pg[k];
            mgy[k] = mgy[k] + pg[k] * py[k];
        }
    }
    let eps = T::from_f64(epsilon);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut gin = Vec::with_capacity(y.len());
    for (py, pg) in y.chunks(c).zip(g.chunks(c)) {
        for k in 0..c {
            gin.push((pg[k] - mg[k] * inv_n - py[k] * mgy[k] * inv_n) * inv_std[k]);
        }
    }
    Tensor::new(&[h, w, c], gin)
}

/// 2x2 average pooling; a trailing odd row or column is dropped.
pub fn avg_pool2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = input.hwc()?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(KernelError::Parameter {
            op: "avg_pool2",
            detail: format!("{h}x{w} too small to pool"),
        });
    }
    let x = input.data();
    let quarter = T::from_f64(0.25);
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for k in 0..c {
                let at = |y: usize, xx: usize| x[(y * w + xx) * c + k];
                let s = at(2 * oy, 2 * ox) + at(2 * oy, 2 * ox + 1) + at(2 * oy + 1, 2 * ox) + at(2 * oy + 1, 2 * ox + 1);
                out.push(s * quarter);
            }
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

pub(crate) fn avg_pool2_backward<T: Scalar>(grad_out: &Tensor<T>, in_h: usize, in_w: usize) -> Result<Tensor<T>> {
    let (oh, ow, c) = grad_out.hwc()?;
    let g = grad_out.data();
    let quarter = T::from_f64(0.25);
    let mut gin = vec![T::zero(); in_h * in_w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for k in 0..c {
                let v = g[(oy * ow + ox) * c + k] * quarter;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    gin[((2 * oy + dy) * in_w + 2 * ox + dx) * c + k] = v;
                }
            }
        }
    }
    Tensor::new(&[in_h, in_w, c], gin)
}

/// Concatenates rank-3 tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or(KernelError::EmptyGroup { op: "concat_channels" })?;
    let (h, w, _) = first.hwc()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (ph, pw, pc) = p.hwc()?;
        if (ph, pw) != (h, w) {
            return Err(KernelError::Shape {
                op: "concat_channels",
                expected: vec![h, w, pc],
                actual: p.shape().to_vec(),
            });
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(h * w * total);
    for px in 0..h * w {
        for (p, &pc) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[px * pc..(px + 1) * pc]);
        }
    }
    Tensor::new(&[h, w, total], out)
}

/// Inverse of [`concat_channels`]: splits into blocks of the given widths.
pub fn split_channels<T: Scalar>(input: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (h, w, c) = input.hwc()?;
    if widths.iter().sum::<usize>() != c {
        return Err(KernelError::Shape {
            op: "split_channels",
            expected: widths.to_vec(),
            actual: input.shape().to_vec(),
        });
    }
    let mut outs: Vec<Vec<T>> = widths.iter().map(|&pc| Vec::with_capacity(h * w * pc)).collect();
    for px in input.data().chunks(c) {
        let mut off = 0;
        for (o, &pc) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&px[off..off + pc]);
            off += pc;
        }
    }
    outs.into_iter().zip(widths).map(|(d, &pc)| Tensor::new(&[h, w, pc], d)).collect()
}
