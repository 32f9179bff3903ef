//! Central finite-difference verification of tape gradients.

use super::{GradTape, KernelError, Result, Tensor, Var};

/// Points where some relu input is closer than this to zero are rejected.
pub const RELU_MARGIN: f64 = 1e-4;

/// Smallest denominator of the relative error.
pub const ABSOLUTE_FLOOR: f64 = 1e-8;

/// A central difference of `f` carries rounding error of about
/// `ε·|f| / eps`; gradients are compared relative to at least this many times
/// that error.
pub const NOISE_FACTOR: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates: usize,
    pub relu_margin: f64,
}

/// Max over coordinates of `|analytic - central| / max(|analytic|, |central|, floor)`
/// for a scalar function of one tensor, where
/// `floor = max(1e-8, 1e4 · ε · max(|f(x+eps)|, |f(x-eps)|) / eps)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut GradTape, Var) -> Result<Var>,
{
    let report = grad_check_many(|t, vars| f(t, vars[0]), std::slice::from_ref(point), eps)?;
    Ok(report.max_relative_error)
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    grad_check_with(f, points, eps, RELU_MARGIN)
}

/// [`grad_check_many`] with an explicit minimum distance of relu inputs from
/// zero. Independently of the margin, every perturbed evaluation must keep the
/// relu and abs input signs of the base point, otherwise the point is
/// rejected as [`KernelError::NearKink`].
pub fn grad_check_with<F>(f: F, points: &[Tensor], eps: f64, relu_margin: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(KernelError::Parameter {
            op: "grad_check",
            detail: format!("eps {eps:e} outside [1e-7, 1e-3]"),
        });
    }
    let mut tape = GradTape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(KernelError::Shape {
            op: "grad_check",
            expected: vec![1],
            actual: tape.shape(out).to_vec(),
        });
    }
    let margin = tape.relu_margin();
    if margin < relu_margin {
        return Err(KernelError::NearKink { margin });
    }
    let signature = tape.kink_signature();
    let grads = tape.backward(out)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut t = GradTape::new();
        let vs: Vec<Var> = inputs.iter().map(|p| t.constant(p.clone())).collect();
        let o = f(&mut t, &vs)?;
        if t.kink_signature() != signature {
            return Err(KernelError::NearKink { margin });
        }
        Ok(t.value(o).data()[0])
    };

    let mut worst = 0.0f64;
    let mut coordinates = 0;
    let mut probe: Vec<Tensor> = points.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(points[k].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for i in 0..points[k].len() {
            let x0 = points[k].data()[i];
            probe[k].data_mut()[i] = x0 + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let central = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            let floor = (NOISE_FACTOR * f64::EPSILON * up.abs().max(down.abs()) / eps).max(ABSOLUTE_FLOOR);
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(floor);
            worst = worst.max(rel);
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        coordinates,
        relu_margin: margin,
    })
}
