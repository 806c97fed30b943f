//! AdamW with decoupled weight decay.

use super::{Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: applied to the weights directly, not to gradients.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers, one pair per parameter, plus the step count.
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimizer step over `params`, reading each tensor's accumulated
/// gradient. The caller zeroes gradients between steps.
pub fn adamw_step(
    params: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    assert_eq!(params.len(), state.m.len(), "state built for these params");
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (index, p) in params.iter().enumerate() {
        let mut inner = p.0.borrow_mut();
        if !inner.requires_grad || inner.grad.is_none() {
            return Err(TensorError::MissingGrad { index });
        }
        let grad = inner.grad.take().expect("checked above");
        let m = &mut state.m[index];
        let v = &mut state.v[index];
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let w = inner.data[i];
            inner.data[i] = w - cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * w);
        }
        inner.grad = Some(grad);
    }
    Ok(())
}
