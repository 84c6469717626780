//! SGD with momentum and L2 weight decay, plus the step learning-rate schedule.

use crate::autodiff::{ParamId, ParamStore, Parameter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v ← momentum·v − lr·(g + weight_decay·θ)`, then `θ ← θ + v`.
pub fn sgd_step(param: &mut Parameter, velocity: &mut Tensor, cfg: SgdConfig) -> Result<()> {
    if velocity.shape() != param.value.shape() {
        return Err(Error::Shape {
            op: "sgd_step",
            lhs: param.value.shape().to_vec(),
            rhs: velocity.shape().to_vec(),
        });
    }
    let grads = param.grad.data();
    let values = param.value.data_mut();
    for ((theta, v), g) in values.iter_mut().zip(velocity.data_mut()).zip(grads) {
        *v = cfg.momentum * *v - cfg.lr * (g + cfg.weight_decay * *theta);
        *theta += *v;
    }
    Ok(())
}

/// Velocity buffers for every parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn zeros(store: &ParamStore) -> Self {
        Self {
            velocity: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// Applies one step to `trainable` only; other parameters and their
    /// velocities are untouched.
    pub fn step(&mut self, store: &mut ParamStore, trainable: &[ParamId], cfg: SgdConfig) -> Result<()> {
        for &id in trainable {
            let idx = store.ids().position(|x| x == id).expect("id from this store");
            sgd_step(store.get_mut(id), &mut self.velocity[idx], cfg)?;
        }
        Ok(())
    }
}

/// `lr0 · decay^⌊epoch / period⌋` for a zero-based epoch.
pub fn lr_at_epoch(lr0: f64, decay: f64, period: usize, epoch: usize) -> f64 {
    lr0 * decay.powi((epoch / period.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: f64, grad: f64) -> Parameter {
        let mut p = Parameter::new(Tensor::scalar(value));
        p.grad = Tensor::scalar(grad);
        p
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = param(1.0, 0.5);
        let mut v = Tensor::scalar(0.0);
        sgd_step(&mut p, &mut v, SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }).unwrap();
        assert!((p.value.value() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_only() {
        let mut p = param(1.0, 0.0);
        let mut v = Tensor::scalar(0.0);
        sgd_step(&mut p, &mut v, SgdConfig { lr: 1.0, momentum: 0.0, weight_decay: 0.0005 }).unwrap();
        assert!((p.value.value() - 0.9995).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = param(0.7, 0.0);
        let mut v = Tensor::scalar(0.0);
        for _ in 0..5 {
            sgd_step(&mut p, &mut v, SgdConfig { lr: 0.3, momentum: 0.9, weight_decay: 0.0 }).unwrap();
        }
        assert_eq!(p.value.value(), 0.7);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = param(0.0, 1.0);
        let mut v = Tensor::scalar(0.0);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        sgd_step(&mut p, &mut v, cfg).unwrap();
        sgd_step(&mut p, &mut v, cfg).unwrap();
        // v1 = -0.1, v2 = -0.09 - 0.1 = -0.19
        assert!((p.value.value() + 0.29).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = param(0.0, 1.0);
        let mut v = Tensor::zeros(&[2, 2]);
        assert!(sgd_step(&mut p, &mut v, SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }).is_err());
    }

    #[test]
    fn step_schedule() {
        let lrs: Vec<f64> = [0, 9, 10, 19, 20, 30, 39].iter().map(|&e| lr_at_epoch(0.01, 0.1, 10, e)).collect();
        let expected = [0.01, 0.01, 0.001, 0.001, 1e-4, 1e-5, 1e-5];
        for (a, b) in lrs.iter().zip(expected) {
            assert!((a - b).abs() < 1e-18 + 1e-12 * b, "{a} vs {b}");
        }
    }
}
