//! Adam with L2 weight decay and the polynomial learning-rate schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{select_axis, Gradients, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {param} at element {index}")]
    NonFiniteGradient { param: usize, index: usize },
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error("poly_lr: epochs must be positive")]
    ZeroEpochs,
    #[error("poly_lr: epoch {epoch} outside 0..={epochs}")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `lr0 * (1 - epoch / epochs)^0.9`.
pub fn poly_lr(epoch: usize, epochs: usize, lr0: f64) -> Result<f64, OptimError> {
    if epochs == 0 {
        return Err(OptimError::ZeroEpochs);
    }
    if epoch > epochs {
        return Err(OptimError::EpochOutOfRange { epoch, epochs });
    }
    Ok(lr0 * (1.0 - epoch as f64 / epochs as f64).powf(0.9))
}

/// A trainable tensor together with its Adam moment estimates.
///
/// Moments live next to the value so structural pruning can slice all
/// three with the same indices.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    value: Tensor<T>,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(data: Vec<T>, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let value = Tensor::param(data, shape)?;
        let n = value.numel();
        Ok(Param { value, m: vec![T::zero(); n], v: vec![T::zero(); n] })
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn moments(&self) -> (&[T], &[T]) {
        (&self.m, &self.v)
    }

    /// Keeps only `keep` along `axis` in the value and both moments.
    pub fn select(&mut self, axis: usize, keep: &[usize]) -> Result<(), TensorError> {
        let shape = self.value.shape().to_vec();
        let (data, new_shape) = select_axis(self.value.data(), &shape, axis, keep);
        self.m = select_axis(&self.m, &shape, axis, keep).0;
        self.v = select_axis(&self.v, &shape, axis, keep).0;
        self.value = Tensor::param(data, new_shape)?;
        Ok(())
    }

    /// Replaces the value, resetting the moments.
    pub fn assign(&mut self, data: Vec<T>) -> Result<(), TensorError> {
        let shape = self.value.shape().to_vec();
        *self = Param::new(data, shape)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the weights (AdamW) instead of adding
    /// an L2 term to the gradient.
    pub decoupled_weight_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5, decoupled_weight_decay: false }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update over `params` using `grads` from the latest backward pass.
///
/// Gradients are validated before anything is written, so a rejected step
/// leaves parameters, moments and the step counter untouched.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Param<T>],
    grads: &Gradients<T>,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), OptimError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(OptimError::BadLearningRate(lr));
    }
    let raw: Vec<Vec<T>> = params.iter().map(|p| grads.get_or_zeros(&p.value)).collect();
    for (pi, g) in raw.iter().enumerate() {
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteGradient { param: pi, index });
        }
    }
    let cfg = state.config;
    let t = state.step + 1;
    let f = T::from_f64_lossy;
    let (b1, b2, eps, wd) = (f(cfg.beta1), f(cfg.beta2), f(cfg.eps), f(cfg.weight_decay));
    let bc1 = f(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = f(1.0 - cfg.beta2.powi(t as i32));
    let lr_t = f(lr);
    for (p, g) in params.iter_mut().zip(raw) {
        let mut w = p.value.to_vec();
        for i in 0..w.len() {
            let gi = if cfg.decoupled_weight_decay { g[i] } else { g[i] + wd * w[i] };
            p.m[i] = b1 * p.m[i] + (T::one() - b1) * gi;
            p.v[i] = b2 * p.v[i] + (T::one() - b2) * gi * gi;
            let m_hat = p.m[i] / bc1;
            let v_hat = p.v[i] / bc2;
            if cfg.decoupled_weight_decay {
                let decay = lr_t * wd * w[i];
                w[i] -= decay;
            }
            w[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        let shape = p.value.shape().to_vec();
        p.value = Tensor::param(w, shape)?;
    }
    state.step = t;
    Ok(())
}
