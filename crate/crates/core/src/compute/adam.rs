use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, Matrix, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over several stores sharing a single step counter.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &Gradients) -> Result<()> {
        for store in stores.iter() {
            for p in store.iter().filter(|p| p.trainable) {
                match grads.get(&p.name) {
                    None => return Err(Error::Optimizer(format!("no gradient for trainable parameter `{}`", p.name))),
                    Some(g) if g.shape() != p.value.shape() => {
                        return Err(Error::Optimizer(format!("gradient shape mismatch for `{}`", p.name)))
                    }
                    _ => {}
                }
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for store in stores.iter_mut() {
            for p in store.iter_mut().filter(|p| p.trainable) {
                let g = grads.get(&p.name).expect("checked above");
                let (m, v) = self
                    .moments
                    .entry(p.name.clone())
                    .or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
                let values = p.value.as_mut_slice();
                let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
                for (i, &gi) in g.as_slice().iter().enumerate() {
                    ms[i] = beta1 * ms[i] + (1.0 - beta1) * gi;
                    vs[i] = beta2 * vs[i] + (1.0 - beta2) * gi * gi;
                    let mhat = ms[i] / bc1;
                    let vhat = vs[i] / bc2;
                    values[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Single-store Adam update.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    state.step(&mut [params], grads)
}
