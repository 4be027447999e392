use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::scalar::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState<T: Real = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: store.zero_grads(),
            v: store.zero_grads(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable entry.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Shape(format!(
                "adam: {} grads, {} moments for {} params",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        for (i, (e, g)) in store.iter().zip(grads).enumerate() {
            if e.value.shape() != g.shape() || self.m[i].shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "adam: `{}` is {:?}, gradient {:?}",
                    e.name,
                    e.value.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let c = &self.config;
        let b1 = T::real(c.beta1);
        let b2 = T::real(c.beta2);
        let bc1 = T::real(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::real(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::real(c.lr);
        let eps = T::real(c.eps);
        let one = T::one();
        let ids: Vec<_> = store.ids().filter(|&id| store.entries()[id.index()].trainable).collect();
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[i].data()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
