//! Adam and global-norm gradient clipping.

use alloc::vec::Vec;

use num_traits::Float;
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient in tensor {index} ({count} bad entries); step aborted")]
    NonFinite { index: usize, count: usize },
    #[error("{params} parameters but {grads} gradients")]
    Mismatch { params: usize, grads: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are kept in the parameter precision.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<(), OptimError> {
        if params.len() != grads.len() {
            return Err(OptimError::Mismatch { params: params.len(), grads: grads.len() });
        }
        for (index, g) in grads.iter().enumerate() {
            let count = g.data().iter().filter(|x| !x.is_finite()).count();
            if count > 0 {
                return Err(OptimError::NonFinite { index, count });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - Float::powi(beta1, t);
        let c2 = 1.0 - Float::powi(beta2, t);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + one_b1 * gi;
                let mh = mi.to_f64() / c1;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + one_b2 * gi * gi;
                let vh = vi.to_f64() / c2;
                pd[i] -= T::from_f64(lr * mh / (Float::sqrt(vh) + eps));
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all tensors.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    Float::sqrt(grads.iter().map(Tensor::sum_squares).sum())
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm observed before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
