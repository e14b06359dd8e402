//! AdamW with a halve-on-plateau (or fixed-step) learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// Halve when the epoch loss has not improved by `min_delta` (relative)
    /// for `patience` epochs.
    Plateau { patience: usize, min_delta: f64 },
    /// Halve after every `every` steps, at most `times` times.
    Step { every: u64, times: u32 },
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            schedule: Schedule::Plateau {
                patience: 2,
                min_delta: 1e-3,
            },
        }
    }
}

/// Optimizer state, serializable into checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub lr: f64,
    pub step: u64,
    pub skipped: u64,
    pub halvings: u32,
    pub best_epoch_loss: Option<f64>,
    pub stale_epochs: usize,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// What happened on one call to [`AdamW::step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was non-finite; nothing changed.
    Skipped,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            cfg,
            step: 0,
            skipped: 0,
            halvings: 0,
            best_epoch_loss: None,
            stale_epochs: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply the gradients held in `store` to its trainable parameters, then
    /// clear them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<StepOutcome> {
        if let Some(name) = store.frozen().find(|n| store.grad(n).is_some()) {
            return Err(Error::FrozenUpdate(name.to_string()));
        }
        if store.grads().any(|(_, g)| !g.is_finite()) {
            self.skipped += 1;
            log::warn!("non-finite gradient at step {}; update skipped", self.step);
            store.zero_grad();
            return Ok(StepOutcome::Skipped);
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let names: Vec<String> = store.grads().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let g = store.grad(&name).expect("listed gradient").clone();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(&name).expect("gradient of a stored parameter");
            let decay = 1.0 - self.lr * self.cfg.weight_decay;
            for (((pi, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.cfg.eps);
                *pi = *pi * decay - self.lr * update;
            }
        }
        store.zero_grad();
        if let Schedule::Step { every, times } = self.cfg.schedule {
            if every > 0 && self.step % every == 0 && self.halvings < times {
                self.halve();
            }
        }
        Ok(StepOutcome::Applied)
    }

    fn halve(&mut self) {
        self.lr *= 0.5;
        self.halvings += 1;
        log::info!("learning rate halved to {}", self.lr);
    }

    /// Feed the mean loss of a finished epoch to the plateau schedule.
    pub fn end_epoch(&mut self, loss: f64) {
        let Schedule::Plateau { patience, min_delta } = self.cfg.schedule else {
            return;
        };
        match self.best_epoch_loss {
            Some(best) if loss >= best * (1.0 - min_delta) => {
                self.stale_epochs += 1;
                if self.stale_epochs >= patience {
                    self.halve();
                    self.stale_epochs = 0;
                }
            }
            _ => {
                self.best_epoch_loss = Some(loss);
                self.stale_epochs = 0;
            }
        }
    }
}
