use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, Parameterized, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Adam with bias correction. Parameters without a gradient entry are
/// treated as having a zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub slots: BTreeMap<String, AdamSlot<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut dyn Parameterized<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<(), AutodiffError> {
        let mut problem = None;
        params.visit_params(&mut |name, p| {
            if problem.is_some() {
                return;
            }
            if let Some(g) = grads.get(name) {
                if g.shape() != p.shape() {
                    problem = Some(AutodiffError::Shape(format!(
                        "gradient for {name} has shape {:?}, parameter has {:?}",
                        g.shape(),
                        p.shape()
                    )));
                } else if !g.all_finite() {
                    problem = Some(AutodiffError::NonFiniteGrad(name.to_string()));
                }
            }
        });
        if let Some(e) = problem {
            return Err(e);
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = T::lit(1.0 - beta1.powi(t));
        let bc2 = T::lit(1.0 - beta2.powi(t));
        let (b1, b2, eps, lr) = (T::lit(beta1), T::lit(beta2), T::lit(eps), T::lit(lr));
        let slots = &mut self.slots;
        params.visit_params_mut(&mut |name, p| {
            let slot = slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
                m: vec![T::zero(); p.len()],
                v: vec![T::zero(); p.len()],
            });
            let g = grads.get(name).map(|g| g.data());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(T::zero(), |g| g[i]);
                slot.m[i] = b1 * slot.m[i] + (T::one() - b1) * gi;
                slot.v[i] = b2 * slot.v[i] + (T::one() - b2) * gi * gi;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
        Ok(())
    }
}
