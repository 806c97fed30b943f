//! Gradient verification by central differences.

use super::{Tape, Tensor, TensorError};

/// Default perturbation for [`finite_diff_check`].
pub const FD_EPSILON: f64 = 1e-5;

/// Compares the tape gradient of `f` at `x0` against central differences.
///
/// `f` receives a fresh tape and the probe tensor and must return a scalar
/// loss; it may close over other tensors (parameters stay fixed during the
/// probe). Returns the largest elementwise error
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_diff_check<F>(
    f: F,
    x0: &[f64],
    shape: &[usize],
    eps: f64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor, TensorError>,
{
    let x = Tensor::param(x0.to_vec(), shape)?;
    let mut tape = Tape::new();
    let loss = f(&mut tape, &x)?;
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss { numel: loss.numel() });
    }
    tape.backward(&loss)?;
    let analytic = x.grad().expect("probe tensor is a parameter");

    let mut worst: f64 = 0.0;
    let mut probe = x0.to_vec();
    for i in 0..probe.len() {
        let saved = probe[i];
        probe[i] = saved + eps;
        let hi = eval(&f, &probe, shape)?;
        probe[i] = saved - eps;
        let lo = eval(&f, &probe, shape)?;
        probe[i] = saved;
        let numeric = (hi - lo) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs()
            / f64::max(1.0, f64::max(analytic[i].abs(), numeric.abs()));
        worst = worst.max(err);
    }
    Ok(worst)
}

fn eval<F>(f: &F, data: &[f64], shape: &[usize]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor, TensorError>,
{
    let x = Tensor::from_vec(data.to_vec(), shape)?;
    let mut tape = Tape::new();
    Ok(f(&mut tape, &x)?.item())
}
