//! Adaptive-moment optimizer with L2 weight decay folded into the gradient.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    state: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: Vec::new() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Forgets the moments of one parameter, e.g. after its shape changed.
    pub fn reset(&mut self, id: ParamId) {
        if let Some(s) = self.state.get_mut(id.index()) {
            *s = Moments::default();
        }
    }

    /// Steps of the bias correction taken so far for `id`.
    pub fn steps(&self, id: ParamId) -> i32 {
        self.state.get(id.index()).map_or(0, |s| s.steps)
    }

    /// One update of every parameter; `grads[i]` belongs to the `i`-th parameter of `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Dimension { op: "Adam::step", left: vec![params.len()], right: vec![grads.len()] });
        }
        self.state.resize_with(params.len(), Moments::default);
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.config;
        for (id, grad) in params.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let w = params.get_mut(id).data_mut();
            if grad.len() != w.len() {
                return Err(Error::Dimension { op: "Adam::step", left: vec![w.len()], right: vec![grad.len()] });
            }
            let s = &mut self.state[id.index()];
            if s.m.len() != w.len() {
                *s = Moments { m: vec![0.0; w.len()], v: vec![0.0; w.len()], steps: 0 };
            }
            s.steps += 1;
            let c1 = 1.0 - libm::pow(beta1, s.steps as f64);
            let c2 = 1.0 - libm::pow(beta2, s.steps as f64);
            for j in 0..w.len() {
                let g = grad[j] + weight_decay * w[j];
                s.m[j] = beta1 * s.m[j] + (1.0 - beta1) * g;
                s.v[j] = beta2 * s.v[j] + (1.0 - beta2) * g * g;
                let m_hat = s.m[j] / c1;
                let v_hat = s.v[j] / c2;
                w[j] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, -2.0]));
        let mut adam = Adam::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
        adam.step(&mut store, &[vec![0.3, -5.0]], 0.1).unwrap();
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![3.0, -4.0]));
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..3000 {
            let g: Vec<f64> = store.get(id).data().iter().map(|w| 2.0 * (w - 1.0)).collect();
            adam.step(&mut store, &[g], 0.01).unwrap();
        }
        assert!(store.get(id).data().iter().all(|w| (w - 1.0).abs() < 1e-2));
    }

    #[test]
    fn reset_and_reshape_restart_moments() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.0]));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &[vec![1.0]], 0.1).unwrap();
        adam.step(&mut store, &[vec![1.0]], 0.1).unwrap();
        assert_eq!(adam.steps(id), 2);
        adam.reset(id);
        assert_eq!(adam.steps(id), 0);
        store.replace(id, Tensor::vector(vec![0.0, 0.0]));
        adam.step(&mut store, &[vec![1.0, 1.0]], 0.1).unwrap();
        assert_eq!(adam.steps(id), 1);
    }
}
