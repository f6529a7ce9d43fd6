//! Adam optimizer over [`FusionParams`].

use crate::scalar::Scalar;

use super::model::FusionParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: i32,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &FusionParams<T>) -> Self {
        let n = params.parameter_count();
        Self { cfg, step: 0, m: vec![T::zero(); n], v: vec![T::zero(); n] }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    pub fn step(&mut self, params: &mut FusionParams<T>, grads: &FusionParams<T>) {
        self.step += 1;
        let mut flat = Vec::with_capacity(self.m.len());
        grads.for_each_tensor(|_, t| flat.extend_from_slice(t));
        let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let lr = T::lit(self.cfg.learning_rate);
        let eps = T::lit(self.cfg.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.for_each_tensor_mut(|_, t| {
            for p in t.iter_mut() {
                let g = flat[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                i += 1;
            }
        });
    }
}
