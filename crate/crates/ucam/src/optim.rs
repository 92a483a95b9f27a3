//! Parameter updates: Adam for the classification partitions and plain SGD
//! for the variance head, mirroring the two-optimizer training setup.

use std::collections::BTreeMap;

use crate::model::Parameters;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.95, beta2: 0.99, eps: 1e-8 }
    }
}

/// Adam with bias correction; moment state is keyed by parameter entry name
/// and created lazily on first use.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: BTreeMap<&'static str, Vec<f64>>,
    v: BTreeMap<&'static str, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one update to every entry selected by `select`.
    pub fn step(
        &mut self,
        params: &mut Parameters,
        grads: &Parameters,
        select: impl Fn(&str) -> bool,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (dst, src) in params.entries_mut().into_iter().zip(grads.entries()) {
            debug_assert_eq!(dst.name, src.name);
            if !select(dst.name) {
                continue;
            }
            let m = self.m.entry(dst.name).or_insert_with(|| vec![0.0; src.data.len()]);
            let v = self.v.entry(dst.name).or_insert_with(|| vec![0.0; src.data.len()]);
            for k in 0..src.data.len() {
                let g = src.data[k];
                m[k] = self.cfg.beta1 * m[k] + (1.0 - self.cfg.beta1) * g;
                v[k] = self.cfg.beta2 * v[k] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                dst.data[k] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Plain stochastic gradient descent.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }

    pub fn step(
        &self,
        params: &mut Parameters,
        grads: &Parameters,
        select: impl Fn(&str) -> bool,
    ) {
        for (dst, src) in params.entries_mut().into_iter().zip(grads.entries()) {
            if !select(dst.name) {
                continue;
            }
            for (p, &g) in dst.data.iter_mut().zip(src.data.iter()) {
                *p -= self.lr * g;
            }
        }
    }
}

/// The variance head (`theta_u`) is updated by SGD; everything else by Adam.
pub fn is_uncertainty_partition(name: &str) -> bool {
    name.starts_with("theta_u.")
}
