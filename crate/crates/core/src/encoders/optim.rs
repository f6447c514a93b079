use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{slot_of, EncoderParams, Gradients, ParamId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Gradients with a larger global L2 norm are rescaled to this norm;
    /// 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            clip_norm: 5.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be >= 0".into()));
        }
        Ok(())
    }
}

/// Velocity rows whose entries all fall below this are dropped.
const VELOCITY_FLOOR: f64 = 1e-12;

/// SGD with momentum over row-sparse gradients. Only rows with a gradient
/// or a non-negligible velocity are visited.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    velocity: BTreeMap<usize, BTreeMap<u32, Vec<f64>>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            config,
            velocity: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// Applies one update to the `trainable` tensors; gradients for other
    /// tensors are ignored.
    pub fn step(&mut self, params: &mut EncoderParams, grads: &Gradients, trainable: &[ParamId]) {
        let norm = grads.l2_norm();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        let (lr, mu) = (self.config.lr, self.config.momentum);
        for &id in trainable {
            let slot = slot_of(id);
            let tensor = params.tensor_mut(id);
            let cols = tensor.cols;
            let vel = self.velocity.entry(slot).or_default();
            let g = grads.slot_rows(slot);
            let mut keys: Vec<u32> = vel.keys().chain(g.keys()).copied().collect();
            keys.sort_unstable();
            keys.dedup();
            for row in keys {
                let v = vel.entry(row).or_insert_with(|| vec![0.0; cols]);
                let grad = g.get(&row);
                for c in 0..cols {
                    v[c] = mu * v[c] + grad.map_or(0.0, |gr| clip * gr[c]);
                }
                let w = tensor.row_mut(row as usize);
                for c in 0..cols {
                    w[c] -= lr * v[c];
                }
                if v.iter().all(|x| x.abs() < VELOCITY_FLOOR) {
                    vel.remove(&row);
                }
            }
        }
    }
}
