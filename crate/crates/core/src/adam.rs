use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. One [`Adam`] holds the moments for an ordered
/// list of parameter tensors; `step` advances the counter once per call.
#[derive(Clone, Debug)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[&Tensor<T>]) -> Self {
        let zeros = |p: &&Tensor<T>| Tensor::zeros(p.shape());
        Adam {
            config,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor<T> {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor<T> {
        &self.v[i]
    }

    /// Applies one update. Validation happens before anything is mutated, so
    /// an error leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(invalid(format!(
                "adam: state tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != p.shape() {
                return Err(shape_err(
                    "adam_step",
                    format!(
                        "tensor {i}: param {:?}, grad {:?}, state {:?}",
                        p.shape(),
                        g.shape(),
                        self.m[i].shape()
                    ),
                ));
            }
            if !g.data().iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step_size = T::from_f64(c.lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / libm::sqrt(bc2));
        let eps = T::from_f64(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((x, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + one_b1 * gr;
                *vi = b2 * *vi + one_b2 * gr * gr;
                let denom = vi.sqrt() * inv_sqrt_bc2 + eps;
                *x = *x - step_size * *mi / denom;
            }
        }
        Ok(())
    }
}
