//! Named parameter storage and the AdamW optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.frozen.push(false);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }

    pub fn set_frozen(&mut self, i: usize, frozen: bool) {
        self.frozen[i] = frozen;
    }

    /// Freezes every parameter whose name starts with one of `prefixes`.
    pub fn freeze_prefixes(&mut self, prefixes: &[&str]) {
        for (i, n) in self.names.iter().enumerate() {
            if prefixes.iter().any(|p| n.starts_with(p)) {
                self.frozen[i] = true;
            }
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Rounds every value to the nearest `f32`, the precision of checkpoints.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Truncated-free normal init with standard deviation `std`.
pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| dist.sample(rng)).collect(),
    }
}

/// Glorot-uniform weight for a `fan_in x fan_out` linear map.
pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor {
        shape: vec![fan_in, fan_out],
        data: (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(NnError::Config("lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(NnError::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(NnError::Config("eps must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Self {
        Self {
            cfg,
            m: (0..params.len()).map(|i| vec![0.0; params.get(i).len()]).collect(),
            v: (0..params.len()).map(|i| vec![0.0; params.get(i).len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Frozen parameters and parameters without a gradient are
    /// left untouched; a non-finite gradient aborts before anything changes.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(NnError::NonFinite(format!("gradient of `{}`", params.name(i))));
                }
            }
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if params.is_frozen(i) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.get_mut(i);
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p.data[k] -= c.lr * c.weight_decay * p.data[k];
                p.data[k] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut p = store(0.7);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &p);
        for _ in 0..5 {
            opt.step(&mut p, &[Some(Tensor::scalar(0.0))]).unwrap();
        }
        assert_eq!(p.get(0).data[0], 0.7);
    }

    #[test]
    fn first_step_closed_form() {
        let theta = 0.5;
        let mut p = store(theta);
        let c = AdamWConfig::default();
        let mut opt = AdamW::new(c, &p);
        opt.step(&mut p, &[Some(Tensor::scalar(1.0))]).unwrap();
        let expect = theta - c.lr * (1.0 / (1.0 + c.eps)) - c.lr * c.weight_decay * theta;
        assert!((p.get(0).data[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_reference_over_100_steps() {
        let c = AdamWConfig::default();
        let mut p = store(1.3);
        let mut opt = AdamW::new(c, &p);
        let (mut th, mut m, mut v) = (1.3f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = (t as f64 * 0.37).sin() + 0.1 * th;
            opt.step(&mut p, &[Some(Tensor::scalar(g))]).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            th = th - 1e-3 * 1e-2 * th - 1e-3 * mh / (vh.sqrt() + 1e-8);
            assert!((p.get(0).data[0] - th).abs() < 1e-10);
        }
    }

    #[test]
    fn frozen_and_nonfinite() {
        let mut p = store(2.0);
        p.set_frozen(0, true);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &[Some(Tensor::scalar(5.0))]).unwrap();
        assert_eq!(p.get(0).data[0], 2.0);
        let e = opt.step(&mut p, &[Some(Tensor::scalar(f64::NAN))]).unwrap_err();
        assert!(e.to_string().contains("`w`"));
    }
}
