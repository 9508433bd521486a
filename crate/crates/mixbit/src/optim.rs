//! Trainable parameters and the two optimizers used across the pipeline:
//! SGD with momentum for network weights, Adam for architecture strengths.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct OptState {
    pub momentum: Option<Tensor>,
    pub adam_m: Option<Tensor>,
    pub adam_v: Option<Tensor>,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    /// Gradient from the most recent backward pass; zeros before any pass.
    pub grad: Option<Tensor>,
    pub opt: OptState,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self {
            value,
            grad: None,
            opt: OptState::default(),
        }
    }

    pub fn set_grad(&mut self, grad: Tensor) {
        debug_assert!(grad.same_shape(&self.value));
        self.grad = Some(grad);
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// v <- momentum*v + grad + weight_decay*value; value <- value - lr*v
pub fn sgd_momentum_step(
    param: &mut Param,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::InvalidArg("sgd lr must be > 0".to_string()));
    }
    let grad = param
        .grad
        .as_ref()
        .ok_or_else(|| Error::InvalidArg("sgd step without a gradient".to_string()))?;
    if param.opt.momentum.is_none() {
        param.opt.momentum = Some(Tensor::zeros(param.value.shape()));
    }
    let v = param.opt.momentum.as_mut().unwrap();
    for i in 0..param.value.numel() {
        let g = grad.data()[i] + weight_decay * param.value.data()[i];
        let nv = momentum * v.data()[i] + g;
        v.data_mut()[i] = nv;
        param.value.data_mut()[i] -= lr * nv;
    }
    param.opt.step += 1;
    param.value.check_finite("sgd_momentum_step")
}

/// Bias-corrected Adam update; increments the step counter.
pub fn adam_step(param: &mut Param, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::InvalidArg("adam lr must be > 0".to_string()));
    }
    let grad = param
        .grad
        .as_ref()
        .ok_or_else(|| Error::InvalidArg("adam step without a gradient".to_string()))?;
    if param.opt.adam_m.is_none() {
        param.opt.adam_m = Some(Tensor::zeros(param.value.shape()));
        param.opt.adam_v = Some(Tensor::zeros(param.value.shape()));
    }
    param.opt.step += 1;
    let t = param.opt.step as f64;
    let bc1 = 1.0 - beta1.powf(t);
    let bc2 = 1.0 - beta2.powf(t);
    let m = param.opt.adam_m.as_mut().unwrap();
    let v = param.opt.adam_v.as_mut().unwrap();
    for i in 0..param.value.numel() {
        let g = grad.data()[i];
        let nm = beta1 * m.data()[i] + (1.0 - beta1) * g;
        let nv = beta2 * v.data()[i] + (1.0 - beta2) * g * g;
        m.data_mut()[i] = nm;
        v.data_mut()[i] = nv;
        let mhat = nm / bc1;
        let vhat = nv / bc2;
        param.value.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    param.value.check_finite("adam_step")
}

/// Cosine-annealed learning rate for epoch `epoch` of `total` epochs.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let frac = epoch as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}
