//! Adam with bias correction.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::params::{ParamGrads, ParamSet};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates are kept in `f64`; parameters stay `f32`.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            t: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter that has a gradient entry.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads) -> Result<()> {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, epsilon } = self.config;
        let t = self.t as i32;
        let correct1 = 1.0 - libm::pow(beta1, f64::from(t));
        let correct2 = 1.0 - libm::pow(beta2, f64::from(t));
        for (name, grad) in grads {
            let param = params.get_mut(name)?;
            if param.numel() != grad.len() {
                return Err(Error::dim(
                    "adam_step",
                    format!("`{name}` has {} values, gradient {}", param.numel(), grad.len()),
                ));
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                let g = f64::from(grad[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                *p = (f64::from(*p) - lr * m_hat / (libm::sqrt(v_hat) + epsilon)) as f32;
            }
            param.check_finite("adam_step")?;
        }
        Ok(())
    }
}
