//! RMSProp with optional decoupled weight decay.

use crate::model::Parameters;
use serde::{Deserialize, Serialize};

/// RMSProp hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub learning_rate: f32,
    pub rho: f32,
    pub fuzz: f32,
    pub weight_decay: f32,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig { learning_rate: 1e-3, rho: 0.9, fuzz: 1e-8, weight_decay: 0.0 }
    }
}

/// Per-parameter running squared-gradient accumulators plus the config.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    acc: Parameters,
}

impl RmsProp {
    pub fn new(like: &Parameters, config: RmsPropConfig) -> Self {
        RmsProp { config, acc: Parameters::zeros_like(like) }
    }

    /// One update: `acc <- rho*acc + (1-rho)*g^2`,
    /// `p <- p - lr*g/(sqrt(acc)+fuzz) - lr*wd*p`.
    pub fn step(&mut self, params: &mut Parameters, grads: &Parameters) {
        for (slot, (p, g)) in self
            .acc
            .layers
            .iter_mut()
            .zip(params.layers.iter_mut().zip(grads.layers.iter()))
        {
            if let (Some(acc), Some(p), Some(g)) = (slot.as_mut(), p.as_mut(), g.as_ref()) {
                rmsprop_update(
                    p.weights.data_mut(),
                    g.weights.data(),
                    acc.weights.data_mut(),
                    &self.config,
                );
                rmsprop_update(p.bias.data_mut(), g.bias.data(), acc.bias.data_mut(), &self.config);
            }
        }
    }
}

/// Slice-level RMSProp update, shared by the struct and by tests that drive
/// it on plain vectors.
pub fn rmsprop_update(param: &mut [f32], grad: &[f32], acc: &mut [f32], cfg: &RmsPropConfig) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), acc.len());
    let lr = cfg.learning_rate;
    for ((p, &g), a) in param.iter_mut().zip(grad.iter()).zip(acc.iter_mut()) {
        *a = cfg.rho * *a + (1.0 - cfg.rho) * g * g;
        *p -= lr * g / (a.sqrt() + cfg.fuzz) + lr * cfg.weight_decay * *p;
    }
}
