//! First-order optimizers and step-based learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    /// Velocity form: `v <- mu*v + g`, `w <- w - lr*v`.
    Momentum { mu: f64 },
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: beta1(), beta2: beta2(), eps: eps() }
    }

    pub fn name(&self) -> String {
        match self {
            OptimizerKind::Sgd => "sgd".into(),
            OptimizerKind::Momentum { mu } => format!("momentum({mu})"),
            OptimizerKind::Adam { beta1, beta2, eps } => format!("adam({beta1},{beta2},{eps})"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::Sgd => Ok(()),
            OptimizerKind::Momentum { mu } if (0.0..1.0).contains(&mu) => Ok(()),
            OptimizerKind::Adam { beta1, beta2, eps }
                if (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps >= 0.0 =>
            {
                Ok(())
            }
            _ => Err(Error::config("optimizer", format!("invalid hyperparameters {self:?}"))),
        }
    }
}

/// Optimizer kind plus its per-parameter auxiliary vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub kind: OptimizerKind,
    /// Momentum velocity, or Adam's first moment.
    first: Vec<T>,
    /// Adam's second moment.
    second: Vec<T>,
    step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Momentum { .. } => (vec![T::zero(); len], Vec::new()),
            OptimizerKind::Adam { .. } => (vec![T::zero(); len], vec![T::zero(); len]),
        };
        OptimizerState { kind, first, second, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn velocity(&self) -> &[T] {
        &self.first
    }

    pub fn moments(&self) -> (&[T], &[T]) {
        (&self.first, &self.second)
    }

    /// Zeroes all auxiliary vectors and the step counter.
    pub fn reset(&mut self) {
        self.first.fill(T::zero());
        self.second.fill(T::zero());
        self.step = 0;
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T], lr: f64) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, grad, lr, 0.0, self),
            OptimizerKind::Momentum { mu } => sgd_step(params, grad, lr, mu, self),
            OptimizerKind::Adam { .. } => adam_step(params, grad, lr, self),
        }
    }
}

fn check_len(params: usize, grad: usize, aux: Option<usize>) -> Result<()> {
    if params != grad || aux.is_some_and(|a| a != params) {
        return Err(Error::Shape(format!("params {params}, grad {grad}, optimizer state {aux:?}")));
    }
    Ok(())
}

/// Plain SGD when `mu == 0`, velocity-form momentum otherwise.
pub fn sgd_step<T: Real>(params: &mut [T], grad: &[T], lr: f64, mu: f64, state: &mut OptimizerState<T>) -> Result<()> {
    let lr = T::lit(lr);
    if mu == 0.0 {
        check_len(params.len(), grad.len(), None)?;
        for (w, &g) in params.iter_mut().zip(grad) {
            *w = *w - lr * g;
        }
    } else {
        if state.first.is_empty() && !params.is_empty() {
            state.first = vec![T::zero(); params.len()];
        }
        check_len(params.len(), grad.len(), Some(state.first.len()))?;
        let mu = T::lit(mu);
        for ((w, &g), v) in params.iter_mut().zip(grad).zip(state.first.iter_mut()) {
            *v = mu * *v + g;
            *w = *w - lr * *v;
        }
    }
    state.step += 1;
    Ok(())
}

/// Bias-corrected Adam. Uses the betas and epsilon stored in `state.kind`.
pub fn adam_step<T: Real>(params: &mut [T], grad: &[T], lr: f64, state: &mut OptimizerState<T>) -> Result<()> {
    let OptimizerKind::Adam { beta1, beta2, eps } = state.kind else {
        return Err(Error::config("optimizer", "adam_step on a non-Adam state"));
    };
    if state.first.is_empty() && !params.is_empty() {
        state.first = vec![T::zero(); params.len()];
        state.second = vec![T::zero(); params.len()];
    }
    check_len(params.len(), grad.len(), Some(state.first.len()))?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = T::lit(1.0 / (1.0 - beta1.powi(t)));
    let c2 = T::lit(1.0 / (1.0 - beta2.powi(t)));
    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
    let (lr, eps) = (T::lit(lr), T::lit(eps));
    for (((w, &g), m), v) in params.iter_mut().zip(grad).zip(state.first.iter_mut()).zip(state.second.iter_mut()) {
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        let m_hat = *m * c1;
        let v_hat = *v * c2;
        *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum LrRule {
    Constant,
    /// `base * factor^floor(step / interval)`
    StepDecay { interval: u64, factor: f64 },
    /// `base * (1 + gamma*step)^(-power)`
    InvDecay { gamma: f64, power: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    #[serde(flatten)]
    pub rule: LrRule,
}

impl LrSchedule {
    pub fn constant(base_lr: f64) -> Self {
        LrSchedule { base_lr, rule: LrRule::Constant }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::config("schedule.base_lr", "must be > 0"));
        }
        match self.rule {
            LrRule::StepDecay { interval, factor } if interval == 0 || !(factor > 0.0 && factor <= 1.0) => {
                Err(Error::config("schedule", "step decay needs interval >= 1 and factor in (0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

pub fn lr_at(schedule: &LrSchedule, step: u64) -> f64 {
    let base = schedule.base_lr;
    match schedule.rule {
        LrRule::Constant => base,
        LrRule::StepDecay { interval, factor } => base * factor.powi((step / interval.max(1)) as i32),
        LrRule::InvDecay { gamma, power } => base * (1.0 + gamma * step as f64).powf(-power),
    }
}
