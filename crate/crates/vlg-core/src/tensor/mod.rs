//! Dense `f64` tensors and reverse-mode differentiation on a Wengert tape.
//!
//! The design keeps the auditable surface small: a dozen primitive ops
//! with hand-written backward rules, each verified against central
//! differences. Models compose those primitives; nothing else is
//! differentiable. Two structural ops (`reshape`, which moves no data,
//! and `recip`, required by ratio-form losses) extend the arithmetic set,
//! and `layer_norm` exists as a fused op behind an off-by-default config
//! flag in the refiner.
//!
//! A [`Tensor`] is a cheaply clonable handle (`Rc<RefCell<..>>`) to shape,
//! row-major data, and an optional gradient buffer. A [`Tape`] records
//! each op applied to tensors that require gradients; [`Tape::backward`]
//! replays the records in reverse and accumulates `∂loss/∂t` into every
//! `requires_grad` tensor. Tapes are single-threaded; parallel callers
//! build one tape per thread.

mod attention;
mod check;
mod io;
mod optim;
mod tape;

pub use attention::{cross_attention, scaled_dot_attention, AttentionParams, AttnMeter};
pub use check::{finite_diff_check, FD_EPSILON};
pub use io::{read_tensor, write_tensor, TensorIoError};
pub use optim::{adamw_step, AdamConfig, AdamState};
pub use tape::Tape;

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid shape {shape:?} for buffer of length {len}")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("parameter {index} has no gradient buffer")]
    MissingGrad { index: usize },
    #[error("heads ({heads}) must divide the channel width ({channels})")]
    HeadSplit { heads: usize, channels: usize },
}

pub(crate) struct TensorInner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Shared handle to an n-dimensional row-major `f64` array.
///
/// Clones alias the same storage. Scalars are rank-1 tensors of length 1.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<RefCell<TensorInner>>);

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor, TensorError> {
        if shape.is_empty() || numel_of(shape) != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor(Rc::new(RefCell::new(TensorInner {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }))))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::from_vec(vec![value; numel_of(shape)], shape).expect("consistent shape")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::full(&[1], value)
    }

    /// Identity matrix of extent `n`.
    pub fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_vec(data, &[n, n]).expect("consistent shape")
    }

    /// I.i.d. `N(0, sigma^2)` entries from `rng`.
    pub fn randn<R: Rng>(rng: &mut R, shape: &[usize], sigma: f64) -> Tensor {
        let data = (0..numel_of(shape))
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * sigma
            })
            .collect();
        Tensor::from_vec(data, shape).expect("consistent shape")
    }

    /// Trainable tensor: `requires_grad` set and a zeroed gradient buffer.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor, TensorError> {
        let t = Tensor::from_vec(data, shape)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.0.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// Enables or disables gradient tracking; enabling allocates a zeroed
    /// gradient buffer so untouched parameters read back as zero gradients.
    pub fn set_requires_grad(&self, on: bool) {
        let mut inner = self.0.borrow_mut();
        inner.requires_grad = on;
        if on && inner.grad.is_none() {
            inner.grad = Some(vec![0.0; inner.data.len()]);
        }
    }

    pub fn value(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    pub fn borrow_data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.0.borrow(), |inner| inner.data.as_slice())
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        let inner = self.0.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.borrow_mut().grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Overwrites the stored values; shape is unchanged.
    pub fn set_data(&self, data: &[f64]) {
        let mut inner = self.0.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data.copy_from_slice(data);
    }

    /// Independent copy with no gradient tracking.
    pub fn detached(&self) -> Tensor {
        let inner = self.0.borrow();
        Tensor::from_vec(inner.data.clone(), &inner.shape).expect("consistent shape")
    }

    pub(crate) fn ptr(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut inner = self.0.borrow_mut();
        let len = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; len]);
        debug_assert_eq!(grad.len(), delta.len());
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("data", &inner.data)
            .finish()
    }
}

/// Splits `shape` at `axis` into (outer, extent, inner) run lengths for
/// walking a row-major buffer along one axis.
pub(crate) fn axis_runs(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
pub(crate) mod test_util {
    /// Largest elementwise relative difference, floored at absolute scale 1.
    pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / f64::max(1.0, f64::max(x.abs(), y.abs())))
            .fold(0.0, f64::max)
    }

    pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        let d = max_rel_diff(a, b);
        assert!(d <= tol, "max relative diff {d:.3e} exceeds {tol:.3e}\n a={a:?}\n b={b:?}");
    }
}
