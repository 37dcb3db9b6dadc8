//! Adam with three parameter groups.
//!
//! Weights get coupled L2 decay (added to the gradient); biases and
//! normalization parameters are undecayed; bit depths and exponents use a
//! much larger step and epsilon. Bit depths are projected to `[0, b_max]`
//! after every update.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, ParamRole};
use crate::quantizer::B_MAX;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Weights,
    Other,
    Quant,
}

impl Group {
    pub fn of(role: ParamRole) -> Group {
        match role {
            ParamRole::Weight => Group::Weights,
            ParamRole::Bits | ParamRole::Exponent => Group::Quant,
            _ => Group::Other,
        }
    }

    pub fn of_key(key: &str) -> Group {
        ParamRole::parse_key(key).map(|(_, r)| Group::of(r)).unwrap_or(Group::Other)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupConfig {
    pub lr: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub weights: GroupConfig,
    pub other: GroupConfig,
    pub quant: GroupConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub b_max: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            weights: GroupConfig {
                lr: 1e-3,
                eps: 1e-5,
                weight_decay: 5e-4,
            },
            other: GroupConfig {
                lr: 1e-3,
                eps: 1e-5,
                weight_decay: 0.0,
            },
            quant: GroupConfig {
                lr: 0.5,
                eps: 1e-3,
                weight_decay: 0.0,
            },
            beta1: 0.9,
            beta2: 0.999,
            b_max: B_MAX,
        }
    }
}

impl AdamConfig {
    pub fn group(&self, g: Group) -> &GroupConfig {
        match g {
            Group::Weights => &self.weights,
            Group::Other => &self.other,
            Group::Quant => &self.quant,
        }
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, key: &str) -> Option<&Moments> {
        self.moments.get(key)
    }

    pub fn moment_keys(&self) -> impl Iterator<Item = &String> {
        self.moments.keys()
    }

    /// Total moment entries held (both estimates).
    pub fn entry_count(&self) -> usize {
        self.moments.values().map(|m| m.m.len() + m.v.len()).sum()
    }

    /// Keep only indices `keep` along `axis` of the moments of `key`.
    /// Returns the number of moment entries removed.
    pub fn select(&mut self, key: &str, axis: usize, keep: &[usize]) -> Result<usize> {
        let Some(mo) = self.moments.get_mut(key) else {
            return Ok(0);
        };
        let before = mo.m.len() + mo.v.len();
        mo.m = mo.m.select(axis, keep)?;
        mo.v = mo.v.select(axis, keep)?;
        Ok(before - mo.m.len() - mo.v.len())
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn step(&mut self, net: &mut Network, grads: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        for (key, g) in grads {
            if !g.is_finite() {
                return Err(Error::Diverged {
                    step: self.step as usize + 1,
                    reason: format!("non-finite gradient for `{key}`"),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (key, grad) in grads {
            let Some(p) = net.params.get_mut(key) else {
                continue;
            };
            if p.shape() != grad.shape() {
                return Err(Error::Network(format!(
                    "gradient for `{key}` has shape {:?}, parameter {:?}",
                    grad.shape(),
                    p.shape()
                )));
            }
            let group = Group::of_key(key);
            let cfg = *self.config.group(group);
            let mo = self.moments.entry(key.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape().to_vec()),
                v: Tensor::zeros(p.shape().to_vec()),
            });
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for (i, (w, &g)) in p.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let mut g = g as f64;
                if cfg.weight_decay != 0.0 {
                    g += cfg.weight_decay * *w as f64;
                }
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let upd = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
                *w = (*w as f64 - upd) as f32;
            }
            if matches!(ParamRole::parse_key(key), Some((_, ParamRole::Bits))) {
                let hi = self.config.b_max;
                p.data_mut().iter_mut().for_each(|b| *b = b.clamp(0.0, hi));
            }
        }
        net.bump_revision();
        Ok(())
    }
}
