//! SGD and AdamW with a cosine-annealed learning rate and optional linear
//! warm-up.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{ParamStore, Tensor};

/// `lr(t) = min + (base - min) * (1 + cos(pi * t' / T')) / 2` after warm-up,
/// where `t'` and `T'` count steps past the warm-up window. During warm-up the
/// rate ramps linearly from `warmup_lr` towards `base_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn cosine(base_lr: f64, total_steps: usize) -> Self {
        LrSchedule {
            base_lr,
            total_steps,
            warmup_steps: 0,
            warmup_lr: 0.0,
            min_lr: 0.0,
        }
    }

    pub fn with_warmup(mut self, steps: usize, lr: f64) -> Self {
        self.warmup_steps = steps;
        self.warmup_lr = lr;
        self
    }

    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            base_lr: lr,
            total_steps: 0,
            warmup_steps: 0,
            warmup_lr: 0.0,
            min_lr: lr,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.warmup_lr + (self.base_lr - self.warmup_lr) * frac;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let t = (step - self.warmup_steps).min(span) as f64 / span as f64;
        let lr = self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos());
        lr.max(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdCosine { momentum: f64 },
    AdamW,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning rate used by the most recent step.
    pub learning_rate: f64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
    velocity: BTreeMap<String, Tensor>,
    steps_taken: u64,
}

impl OptimizerState {
    pub fn sgd(schedule: LrSchedule, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::SgdCosine { momentum },
            schedule,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay,
            learning_rate: schedule.lr_at(0),
            moments: BTreeMap::new(),
            velocity: BTreeMap::new(),
            steps_taken: 0,
        }
    }

    pub fn adamw(schedule: LrSchedule, betas: (f64, f64), weight_decay: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::AdamW,
            schedule,
            betas,
            eps: 1e-8,
            weight_decay,
            learning_rate: schedule.lr_at(0),
            moments: BTreeMap::new(),
            velocity: BTreeMap::new(),
            steps_taken: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(0.0 < b1 && b1 < 1.0 && 0.0 < b2 && b2 < 1.0) {
            return Err(Error::param(format!("betas must lie in (0, 1), got {:?}", self.betas)));
        }
        if self.weight_decay < 0.0 || self.schedule.base_lr < 0.0 {
            return Err(Error::param("learning rate and weight decay must be nonnegative"));
        }
        if let OptimizerKind::SgdCosine { momentum } = self.kind {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::param(format!("momentum must lie in [0, 1), got {momentum}")));
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }
}

/// Applies one update to every unfrozen parameter using its stored gradient.
pub fn optimizer_step(
    params: &mut ParamStore,
    state: &mut OptimizerState,
    step_index: usize,
) -> Result<()> {
    state.validate()?;
    for (name, p) in params.iter() {
        if !p.frozen && p.grad.is_none() {
            return Err(Error::state(format!("missing gradient for `{name}`")));
        }
    }
    let lr = state.schedule.lr_at(step_index);
    state.learning_rate = lr;
    state.steps_taken += 1;
    let t = state.steps_taken as i32;
    let wd = state.weight_decay;

    for (name, p) in params.iter_mut() {
        if p.frozen {
            continue;
        }
        let grad = p.grad.as_ref().expect("checked above");
        match state.kind {
            OptimizerKind::SgdCosine { momentum } => {
                let buf = state
                    .velocity
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(p.value.shape()));
                let first = t == 1;
                for ((w, &g), b) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(buf.data_mut())
                {
                    let d = g + wd * *w;
                    *b = if first { d } else { momentum * *b + d };
                    *w -= lr * *b;
                }
            }
            OptimizerKind::AdamW => {
                let (b1, b2) = state.betas;
                let (m, v) = state.moments.entry(name.clone()).or_insert_with(|| {
                    (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape()))
                });
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (((w, &g), mi), vi) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *mi = b1 * *mi + (1.0 - b1) * g;
                    *vi = b2 * *vi + (1.0 - b2) * g * g;
                    let mhat = *mi / c1;
                    let vhat = *vi / c2;
                    *w -= lr * wd * *w;
                    *w -= lr * mhat / (vhat.sqrt() + state.eps);
                }
            }
        }
    }
    Ok(())
}
