//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::params::{ParamGroup, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Learning rate per parameter group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRates {
    pub grid: f64,
    pub network: f64,
}

impl GroupRates {
    pub fn uniform(lr: f64) -> Self {
        GroupRates { grid: lr, network: lr }
    }

    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Grid => self.grid,
            ParamGroup::Network => self.network,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    /// Steps dropped because the gradient was not finite.
    pub skipped: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, param_count: usize) -> Self {
        OptimizerState {
            config,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            skipped: 0,
        }
    }

    /// One update. Returns false (and leaves everything untouched apart from
    /// the skip counter) when any gradient entry is not finite.
    ///
    /// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + decay * p)`
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P, rates: GroupRates) -> bool {
        let g = grads.flatten();
        assert_eq!(g.len(), self.m.len(), "gradient length does not match optimizer state");
        if !g.iter().all(|v| v.is_finite()) {
            self.skipped += 1;
            return false;
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut offset = 0;
        params.visit_mut(&mut |group, s| {
            let lr = rates.get(group);
            for (i, p) in s.iter_mut().enumerate() {
                let k = offset + i;
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                *p -= lr * (update + weight_decay * *p);
            }
            offset += s.len();
        });
        true
    }
}
