use std::collections::BTreeMap;

use super::params::ParamStore;
use crate::error::{Error, Result};

pub trait Optimizer {
    /// Applies one update from the gradients currently held in `params`.
    /// Every parameter must carry a gradient (zero-filled if the loss did not
    /// reach it).
    fn step(&mut self, params: &mut ParamStore) -> Result<()>;
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction; first and second moments are kept per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

fn missing(name: &str) -> Error {
    Error::contract(format!("parameter {name} has no gradient"))
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(missing(name));
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let grad = p.grad.as_ref().ok_or_else(|| missing(name))?;
            let n = grad.numel();
            let mom = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let value = p.value.data_mut();
            for (i, &g) in grad.data().iter().enumerate() {
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g;
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g * g;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plain stochastic gradient descent.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        for (name, p) in params.iter_mut() {
            let grad = p.grad.as_ref().ok_or_else(|| missing(name))?;
            for (w, g) in p.value.data_mut().iter_mut().zip(grad.data()) {
                *w -= self.lr * g;
            }
        }
        Ok(())
    }
}
