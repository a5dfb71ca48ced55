//! Gradient-step optimizers shared by score training and α training.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Which update rule to use. Serialized names appear in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    RmsProp,
    Adam,
}

/// Optimizer hyperparameters. Defaults: RMSprop decay 0.99 / eps 1e-8,
/// Adam beta1 0.9 / beta2 0.999 with decoupled weight decay.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    #[serde(default)]
    pub momentum: f32,
    #[serde(default = "default_rms_decay")]
    pub rms_decay: f32,
    #[serde(default = "default_adam_beta2")]
    pub adam_beta2: f32,
    #[serde(default)]
    pub weight_decay: f32,
    #[serde(default = "default_eps")]
    pub eps: f32,
}

fn default_rms_decay() -> f32 {
    0.99
}
fn default_adam_beta2() -> f32 {
    0.999
}
fn default_eps() -> f32 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            momentum: 0.0,
            rms_decay: default_rms_decay(),
            adam_beta2: default_adam_beta2(),
            weight_decay: 0.0,
            eps: default_eps(),
        }
    }

    pub fn rmsprop(learning_rate: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::RmsProp,
            ..Self::sgd(learning_rate)
        }
    }

    /// Adam with momentum 0.9 and decoupled weight decay 0.1.
    pub fn adam(learning_rate: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            momentum: 0.9,
            weight_decay: 0.1,
            ..Self::sgd(learning_rate)
        }
    }
}

struct Slot {
    m: Array2<f32>,
    v: Array2<f32>,
}

/// Per-tensor optimizer state. One `Optimizer` drives one list of parameter
/// tensors; `step` must always be called with the same shapes.
pub struct Optimizer {
    config: OptimizerConfig,
    slots: Vec<Slot>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, shapes: &[(usize, usize)]) -> Self {
        let slots = shapes
            .iter()
            .map(|&(r, c)| Slot {
                m: Array2::zeros((r, c)),
                v: Array2::zeros((r, c)),
            })
            .collect();
        Optimizer {
            config,
            slots,
            t: 0,
        }
    }

    /// Applies one update to every tensor. `params` and `grads` pair up by index.
    pub fn step(&mut self, params: &mut [Array2<f32>], grads: &[Array2<f32>]) {
        assert_eq!(params.len(), self.slots.len());
        assert_eq!(grads.len(), self.slots.len());
        self.t += 1;
        let c = self.config;
        let lr = c.learning_rate;
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            assert_eq!(p.dim(), g.dim());
            match c.kind {
                OptimizerKind::Sgd => {
                    if c.momentum > 0.0 {
                        slot.m.zip_mut_with(g, |m, &gv| *m = c.momentum * *m + gv);
                        p.zip_mut_with(&slot.m, |pv, &m| *pv -= lr * m);
                    } else {
                        p.zip_mut_with(g, |pv, &gv| *pv -= lr * gv);
                    }
                }
                OptimizerKind::RmsProp => {
                    let decay = c.rms_decay;
                    slot.v
                        .zip_mut_with(g, |v, &gv| *v = decay * *v + (1.0 - decay) * gv * gv);
                    ndarray::Zip::from(&mut *p)
                        .and(g)
                        .and(&slot.v)
                        .for_each(|pv, &gv, &v| *pv -= lr * gv / (v.sqrt() + c.eps));
                }
                OptimizerKind::Adam => {
                    let b1 = c.momentum;
                    let b2 = c.adam_beta2;
                    slot.m.zip_mut_with(g, |m, &gv| *m = b1 * *m + (1.0 - b1) * gv);
                    slot.v
                        .zip_mut_with(g, |v, &gv| *v = b2 * *v + (1.0 - b2) * gv * gv);
                    let bc1 = 1.0 - b1.powi(self.t as i32);
                    let bc2 = 1.0 - b2.powi(self.t as i32);
                    ndarray::Zip::from(&mut *p)
                        .and(&slot.m)
                        .and(&slot.v)
                        .for_each(|pv, &m, &v| {
                            let mhat = m / bc1;
                            let vhat = v / bc2;
                            *pv -= lr * mhat / (vhat.sqrt() + c.eps);
                        });
                    if c.weight_decay > 0.0 {
                        // decoupled: decay off the raw parameter, not the gradient
                        p.mapv_inplace(|pv| pv - lr * c.weight_decay * pv);
                    }
                }
            }
        }
    }
}
