use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub noise_eta: f64,
    pub noise_gamma: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Decoupled weight decay, applied as `θ ← θ − lr·λ·θ` after each update.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.05,
            batch_size: 16,
            clip_norm: 1.0,
            noise_eta: 0.01,
            noise_gamma: 0.55,
            epochs: 50,
            seed: 0,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.clip_norm > 0.0) {
            errs.push(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            errs.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.weight_decay < 0.0 {
            errs.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.noise_eta < 0.0 {
            errs.push(format!("noise_eta must be non-negative, got {}", self.noise_eta));
        }
        errs
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with annealed Gaussian gradient noise and global-norm clipping.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
    rng: ChaCha8Rng,
}

/// What one update did, for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub raw_norm: f64,
    pub applied_norm: f64,
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Optimizer {
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6e6f_6973_65);
        Optimizer { config, m: BTreeMap::new(), v: BTreeMap::new(), t: 0, rng }
    }

    /// Updates taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Noise, then clipping, then Adam. `grads` is consumed as scratch.
    pub fn step(&mut self, params: &mut ParamStore, mut grads: BTreeMap<String, Tensor>) -> StepInfo {
        let c = &self.config;
        let variance = c.noise_eta / (1.0 + self.t as f64).powf(c.noise_gamma);
        if variance > 0.0 {
            let normal = Normal::new(0.0, variance.sqrt()).expect("finite variance");
            for g in grads.values_mut() {
                for x in g.data_mut() {
                    *x += normal.sample(&mut self.rng);
                }
            }
        }
        let raw_norm = global_norm(&grads);
        let scale = if raw_norm > c.clip_norm { c.clip_norm / raw_norm } else { 1.0 };
        self.t += 1;
        let t = self.t as i32;
        let (bc1, bc2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for (name, g) in &grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * scale;
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                *x -= c.learning_rate * ((*mi / bc1) / ((*vi / bc2).sqrt() + EPSILON) + c.weight_decay * *x);
            }
        }
        StepInfo { raw_norm, applied_norm: raw_norm * scale }
    }
}
