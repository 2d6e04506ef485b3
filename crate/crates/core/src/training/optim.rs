//! SGD with momentum and AdamW over the trainable parameters of a model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::backbone::ModelGraph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    Adamw,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Moment buffers keyed by parameter name, created on a parameter's first update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    step: u64,
    slots: BTreeMap<String, Slot>,
}

impl OptimizerState {
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// One update at learning rate `lr`. Weight decay touches only tensors with
/// at least two dimensions; it is decoupled for AdamW and added to the
/// gradient for SGD.
pub fn optimizer_step(
    model: &mut ModelGraph,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    for p in model.params() {
        if !p.trainable() {
            continue;
        }
        match grads.get(p.name()) {
            None => return Err(Error::Contract(format!("missing gradient for trainable parameter {}", p.name()))),
            Some(g) if g.shape() != p.value().shape() => {
                return Err(Error::TensorShape {
                    name: p.name().to_string(),
                    expected: p.value().shape().to_vec(),
                    found: g.shape().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    for p in model.params_mut() {
        if !p.trainable() {
            continue;
        }
        let g = grads[p.name()].data();
        let decay = if p.value().ndim() >= 2 { cfg.weight_decay } else { 0.0 };
        let slot = state.slots.entry(p.name().to_string()).or_insert_with(|| Slot {
            m: vec![0.0; g.len()],
            v: match cfg.optimizer {
                OptimizerKind::Adamw => vec![0.0; g.len()],
                OptimizerKind::SgdMomentum => Vec::new(),
            },
        });
        let w = p.data_mut();
        match cfg.optimizer {
            OptimizerKind::SgdMomentum => {
                for i in 0..w.len() {
                    let gi = g[i] + decay * w[i];
                    slot.m[i] = cfg.momentum * slot.m[i] + gi;
                    w[i] -= lr * slot.m[i];
                }
            }
            OptimizerKind::Adamw => {
                let (b1, b2) = (cfg.beta1, cfg.beta2);
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for i in 0..w.len() {
                    w[i] -= lr * decay * w[i];
                    slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g[i];
                    slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g[i] * g[i];
                    let mhat = slot.m[i] / c1;
                    let vhat = slot.v[i] / c2;
                    w[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
                }
            }
        }
    }
    Ok(())
}
