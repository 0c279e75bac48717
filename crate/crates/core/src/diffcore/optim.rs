//! SGD (optionally heavy-ball momentum) with global-norm clipping, decoupled
//! weight decay and a warm-up / linear-decay learning-rate schedule.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::dense::Dense;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn warmup_steps(&self) -> usize {
        libm::ceil(self.warmup_fraction * self.total_steps as f64) as usize
    }

    /// Linear ramp from 0 over the warm-up steps, then linear decay to 0 at
    /// `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        let lr = if step < warm {
            self.base_lr * step as f64 / warm as f64
        } else if self.total_steps > warm {
            let left = self.total_steps.saturating_sub(step) as f64;
            self.base_lr * left / (self.total_steps - warm) as f64
        } else {
            0.0
        };
        lr.max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Heavy-ball coefficient; 0 is plain SGD.
    #[serde(default)]
    pub momentum: f64,
    /// Velocity per parameter, allocated on the first step when momentum > 0.
    #[serde(default)]
    pub moments: Vec<Dense>,
}

impl OptimizerState {
    pub fn sgd(schedule: LrSchedule, weight_decay: f64, clip_norm: f64) -> Self {
        OptimizerState {
            schedule,
            weight_decay,
            clip_norm,
            momentum: 0.0,
            moments: Vec::new(),
        }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Scales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for id in params.ids().collect::<Vec<_>>() {
            let (_, _, g) = params.parts_mut(id);
            g.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One update: clip, decay, step, then zero the gradients. With momentum
/// the clipped gradient is accumulated into a velocity `m = mu * m + g` and
/// the step uses `m`.
pub fn optimizer_step(params: &mut ParamStore, state: &mut OptimizerState, step: usize) -> Result<StepStats> {
    if !(0.0..1.0).contains(&state.momentum) {
        return Err(Error::InvalidConfig("momentum must be in [0, 1)".into()));
    }
    for id in params.ids() {
        if !params.grad(id).is_finite() {
            return Err(Error::NonFiniteGradient(params.name(id).into()));
        }
    }
    let grad_norm = clip_grad_norm(params, state.clip_norm);
    let clipped_norm = params.grad_norm();
    let lr = state.schedule.lr_at(step);
    let decay = 1.0 - lr * state.weight_decay;
    let mu = state.momentum;
    if mu > 0.0 && state.moments.len() != params.len() {
        state.moments = params
            .ids()
            .map(|id| {
                let v = params.value(id);
                Dense::zeros(v.rows(), v.cols())
            })
            .collect();
    }
    for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let (_, value, grad) = params.parts_mut(id);
        if mu > 0.0 {
            let m = state.moments[k].as_mut_slice();
            for ((v, g), m) in value.as_mut_slice().iter_mut().zip(grad.as_slice()).zip(m) {
                *m = mu * *m + g;
                *v = *v * decay - lr * *m;
            }
        } else {
            for (v, g) in value.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *v = *v * decay - lr * g;
            }
        }
    }
    params.zero_grad();
    Ok(StepStats {
        lr,
        grad_norm,
        clipped_norm,
    })
}
