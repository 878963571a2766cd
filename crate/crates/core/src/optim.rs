//! SGD with momentum and Adam, with learning-rate milestones.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::param::{ParamKind, ParamMut};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}` (sgd|adam)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Learning rate for logit tensors; `lr` when unset.
    pub lr_logits: Option<f64>,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Weight decay for logit tensors; `weight_decay` when unset.
    pub weight_decay_logits: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            lr_logits: None,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            weight_decay_logits: None,
        }
    }
}

impl OptimConfig {
    fn lr_for(&self, kind: ParamKind) -> f64 {
        match kind {
            ParamKind::Logits => self.lr_logits.unwrap_or(self.lr),
            _ => self.lr,
        }
    }

    fn decay_for(&self, kind: ParamKind) -> f64 {
        match kind {
            ParamKind::Logits => self.weight_decay_logits.unwrap_or(self.weight_decay),
            _ => self.weight_decay,
        }
    }
}

/// Per-parameter optimizer state. SGD keeps its momentum buffer in `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub steps: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimConfig,
    pub slots: BTreeMap<usize, Slot>,
}

/// Learning-rate factor `decay^k` where `k` counts milestones `<= epoch`.
pub fn milestone_factor(milestones: &[usize], decay: f64, epoch: usize) -> f64 {
    decay.powi(milestones.iter().filter(|&&m| m <= epoch).count() as i32)
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Result<Self> {
        let lrs = [Some(config.lr), config.lr_logits];
        if lrs.iter().flatten().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::InvalidArgument(format!("learning rates must be positive, got {lrs:?}")));
        }
        Ok(Optimizer { config, slots: BTreeMap::new() })
    }

    /// Updates every parameter that has a gradient in `grads` (keyed by id).
    /// Parameters without a gradient are left untouched, state included.
    pub fn step(&mut self, params: Vec<ParamMut<'_>>, grads: &HashMap<usize, Tensor>, lr_factor: f64) -> Result<()> {
        let c = self.config.clone();
        for p in params {
            let Some(grad) = grads.get(&p.id) else { continue };
            if grad.shape() != p.value.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("{}: gradient {:?} for parameter {:?}", p.name, grad.shape(), p.value.shape()),
                ));
            }
            let n = p.value.len();
            let slot = self.slots.entry(p.id).or_insert_with(|| Slot { steps: 0, m: vec![0.0; n], v: Vec::new() });
            slot.steps += 1;
            let lr = c.lr_for(p.kind) * lr_factor;
            let wd = c.decay_for(p.kind);
            let w = p.value.data_mut();
            let g = grad.data();
            match c.kind {
                OptimizerKind::Sgd => {
                    for i in 0..n {
                        let gi = g[i] + wd * w[i];
                        slot.m[i] = if slot.steps == 1 { gi } else { c.momentum * slot.m[i] + gi };
                        w[i] -= lr * slot.m[i];
                    }
                }
                OptimizerKind::Adam => {
                    if slot.v.len() != n {
                        slot.v = vec![0.0; n];
                    }
                    let t = slot.steps as i32;
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    for i in 0..n {
                        let gi = g[i] + wd * w[i];
                        slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * gi;
                        slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * gi * gi;
                        let mhat = slot.m[i] / bc1;
                        let vhat = slot.v[i] / bc2;
                        w[i] -= lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
